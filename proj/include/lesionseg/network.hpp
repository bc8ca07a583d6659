#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "lesionseg/tensor.hpp"
#include "lesionseg/types.hpp"

namespace lesionseg::nn {

inline constexpr int kNumClasses = 2;  // background, lesion
inline constexpr double kLeakySlope = 0.01;
inline constexpr double kNormEps = 1e-5;

struct NetworkConfig {
    int input_channels = 2;
    int num_encoder_stages = 7;
    std::vector<int> encoder_convs_per_stage{1, 3, 4, 6, 6, 6, 6};
    // Index 0 is the coarsest decoder stage (directly above the bottleneck).
    std::vector<int> decoder_convs_per_stage{1, 1, 1, 1, 1, 1};
    int base_features = 32;
    int max_features = 384;
    Index3 patch_size{128, 256, 256};
    bool deep_supervision = true;

    // Full-scale layout used for the challenge submission.
    static NetworkConfig paper();
    // 4-stage desk-scale layout: widths (8, 16, 32, 32), patch 32^3.
    static NetworkConfig toy();

    int features(int stage) const;
    Index3 spatial_at(int level) const;
    // Decoder stages (by decoder index) that carry an auxiliary head.
    std::vector<int> aux_decoder_stages() const;
    void validate() const;

    bool operator==(const NetworkConfig&) const = default;
};

struct StageRow {
    std::string part;  // "encoder" or "decoder"
    int stage = 0;
    int width = 0;
    int convs = 0;
    Index3 spatial{};
    bool aux_head = false;
};

std::vector<StageRow> stage_report(const NetworkConfig& config);
std::string format_stage_report(const NetworkConfig& config);

// Closed-form parameter count of build_network(config).
std::int64_t count_parameters(const NetworkConfig& config);

template <typename T>
struct Parameter {
    std::string name;
    std::vector<std::int64_t> shape;
    std::vector<T> value;
};

template <typename T>
using Gradients = std::vector<std::vector<T>>;

struct ConvSpec {
    int in = 0, out = 0, kernel = 3, stride = 1;
    std::size_t weight = 0, bias = 0;  // parameter indices
};

struct NormSpec {
    int channels = 0;
    std::size_t gamma = 0, beta = 0;
};

struct UpSpec {
    int in = 0, out = 0;
    std::size_t weight = 0, bias = 0;
};

struct ResidualBlock {
    ConvSpec conv1;
    NormSpec norm1;
    ConvSpec conv2;
    NormSpec norm2;
    std::optional<ConvSpec> proj;
    std::optional<NormSpec> proj_norm;
};

struct ConvNormAct {
    ConvSpec conv;
    NormSpec norm;
};

struct DecoderStage {
    int level = 0;
    UpSpec up;
    std::vector<ConvNormAct> convs;
    std::optional<ConvSpec> aux_head;
};

namespace detail {
template <typename T>
struct Node;
template <typename T>
class Context;
}  // namespace detail

// Residual encoder U-Net. Forward and backward are const: the weights only
// change through parameters().
template <typename T>
class UNet {
public:
    explicit UNet(NetworkConfig config, std::uint64_t seed = 0);

    const NetworkConfig& config() const noexcept { return config_; }
    std::vector<Parameter<T>>& parameters() noexcept { return params_; }
    const std::vector<Parameter<T>>& parameters() const noexcept { return params_; }
    std::int64_t count_parameters() const noexcept;
    Gradients<T> zero_gradients() const;

    struct Output {
        Tensor<T> logits;            // N x 2 x patch
        std::vector<Tensor<T>> aux;  // coarse-to-fine auxiliary logits
        std::vector<int> aux_factors;  // downsampling factor of each aux output
    };

    // Recorded forward pass; feed it to backward().
    class Pass {
    public:
        Pass();
        ~Pass();
        Pass(Pass&&) noexcept;
        Pass& operator=(Pass&&) noexcept;
        Output output;

    private:
        friend class UNet;
        std::unique_ptr<detail::Context<T>> ctx_;
        std::shared_ptr<detail::Node<T>> logits_node_;
        std::vector<std::shared_ptr<detail::Node<T>>> aux_nodes_;
    };

    Output forward(const Tensor<T>& input) const;
    Pass forward_train(const Tensor<T>& input) const;
    Gradients<T> backward(Pass& pass, const Tensor<T>& d_logits,
                          const std::vector<Tensor<T>>& d_aux) const;

    // Runs one encoder residual block on its own input; used by tests.
    Tensor<T> run_encoder_block(int stage, int block, const Tensor<T>& input) const;
    const ResidualBlock& encoder_block(int stage, int block) const { return encoder_[stage][block]; }
    void zero_final_block_convs();

    // Copies weights from a network with the same layout (e.g. float <-> double).
    template <typename U>
    void load_from(const UNet<U>& other) {
        if (other.parameters().size() != params_.size())
            throw ShapeError("network layouts differ");
        for (std::size_t i = 0; i < params_.size(); ++i) {
            const auto& src = other.parameters()[i];
            if (src.name != params_[i].name || src.value.size() != params_[i].value.size())
                throw ShapeError("parameter mismatch at " + params_[i].name);
            params_[i].value.assign(src.value.begin(), src.value.end());
        }
    }

private:
    std::size_t add_param(std::string name, std::vector<std::int64_t> shape);
    ConvSpec make_conv(const std::string& name, int in, int out, int kernel, int stride);
    NormSpec make_norm(const std::string& name, int channels);
    void init_weights(std::uint64_t seed);
    void run(detail::Context<T>& ctx, const Tensor<T>& input,
             std::shared_ptr<detail::Node<T>>& logits,
             std::vector<std::shared_ptr<detail::Node<T>>>& aux) const;

    NetworkConfig config_;
    std::vector<Parameter<T>> params_;
    ConvNormAct stem_;
    std::vector<std::vector<ResidualBlock>> encoder_;
    std::vector<DecoderStage> decoder_;
    ConvSpec head_;
};

extern template class UNet<float>;
extern template class UNet<double>;

// Builds the network after validating the config (ConfigError on failure).
template <typename T = float>
UNet<T> build_network(const NetworkConfig& config, std::uint64_t seed = 0) {
    config.validate();
    return UNet<T>(config, seed);
}

}  // namespace lesionseg::nn
