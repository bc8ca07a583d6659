#include <doctest.h>

#include <cmath>
#include <random>

#include "lesionseg/errors.hpp"
#include "lesionseg/network.hpp"

using namespace lesionseg;
using namespace lesionseg::nn;

namespace {

NetworkConfig tiny(int stages, int patch, bool aux) {
    NetworkConfig c;
    c.input_channels = 2;
    c.num_encoder_stages = stages;
    c.encoder_convs_per_stage.assign(static_cast<std::size_t>(stages), 1);
    c.encoder_convs_per_stage.back() = 2;
    c.decoder_convs_per_stage.assign(static_cast<std::size_t>(stages - 1), 1);
    c.base_features = 2;
    c.max_features = 4;
    c.patch_size = {patch, patch, patch};
    c.deep_supervision = aux;
    return c;
}

template <typename T>
Tensor<T> random_input(std::mt19937_64& rng, std::int64_t n, const NetworkConfig& c) {
    Tensor<T> t(n, c.input_channels, c.patch_size[0], c.patch_size[1], c.patch_size[2]);
    std::normal_distribution<double> d(0.0, 1.0);
    for (auto& v : t.data) v = static_cast<T>(d(rng));
    return t;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

TEST_CASE("full-scale layout") {
    const auto c = NetworkConfig::paper();
    const std::vector<int> widths{32, 64, 128, 256, 384, 384, 384};
    for (int s = 0; s < 7; ++s) CHECK(c.features(s) == widths[static_cast<std::size_t>(s)]);
    CHECK(c.spatial_at(6) == Index3{2, 4, 4});
    const auto rows = stage_report(c);
    REQUIRE(rows.size() == 13);
    CHECK(rows[0].convs == 1);
    CHECK(rows[3].convs == 6);
    CHECK(rows[6].spatial == Index3{2, 4, 4});
    CHECK(rows[7].part == "decoder");
    CHECK(rows[12].spatial == Index3{128, 256, 256});
    CHECK(c.aux_decoder_stages() == std::vector<int>{2, 3, 4});
    const auto text = format_stage_report(c);
    CHECK(text.find("parameters: " + std::to_string(count_parameters(c))) != std::string::npos);
}

TEST_CASE("toy layout and parameter count") {
    const auto c = NetworkConfig::toy();
    CHECK(c.features(0) == 8);
    CHECK(c.features(3) == 32);
    CHECK(c.aux_decoder_stages().empty());
    // stem 456, encoder 3504 + 10640 + 42272 + 56608, decoder 63616 + 17984 + 4512, head 18
    CHECK(count_parameters(c) == 199610);
    CHECK(build_network<float>(c).count_parameters() == 199610);
    for (const auto& cfg : {tiny(2, 4, false), tiny(5, 16, true), NetworkConfig::paper()}) {
        // the full-scale net is only built for its parameter table
        const UNet<float> net(cfg);
        CHECK(net.count_parameters() == count_parameters(cfg));
    }
}

TEST_CASE("invalid layouts are rejected") {
    auto c = NetworkConfig::toy();
    c.patch_size = {30, 32, 32};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = NetworkConfig::toy();
    c.decoder_convs_per_stage = {1, 1};
    CHECK_THROWS_AS(build_network(c), ConfigError);
    c = NetworkConfig::toy();
    c.encoder_convs_per_stage[1] = 0;
    CHECK_THROWS_AS(count_parameters(c), ConfigError);
}

TEST_CASE("forward shapes and batching") {
    std::mt19937_64 rng(1);
    const auto c = tiny(5, 16, true);
    const auto net = build_network<float>(c, 3);
    const auto x = random_input<float>(rng, 2, c);
    const auto out = net.forward(x);
    CHECK(out.logits.shape == std::array<std::int64_t, 5>{2, 2, 16, 16, 16});
    REQUIRE(out.aux.size() == 1);
    CHECK(out.aux_factors == std::vector<int>{2});
    CHECK(out.aux[0].shape == std::array<std::int64_t, 5>{2, 2, 8, 8, 8});

    // per-sample normalization: each batch element is independent of the others
    for (std::int64_t n = 0; n < 2; ++n) {
        Tensor<float> one(1, 2, 16, 16, 16);
        std::copy(x.channel_ptr(n, 0), x.channel_ptr(n, 0) + 2 * x.spatial_size(), one.data.begin());
        const auto o = net.forward(one);
        double err = 0;
        for (std::size_t i = 0; i < o.logits.size(); ++i)
            err = std::max(err, double(std::abs(o.logits.data[i] - out.logits.channel_ptr(n, 0)[i])));
        CHECK(err < 1e-4);
    }

    const auto same = build_network<float>(c, 3).forward(x);
    CHECK(same.logits.data == out.logits.data);
    const auto other = build_network<float>(c, 4).forward(x);
    CHECK(other.logits.data != out.logits.data);
}

TEST_CASE("zeroed residual branch is the identity") {
    std::mt19937_64 rng(2);
    auto net = build_network<double>(tiny(3, 8, false), 5);
    net.zero_final_block_convs();
    // last stage has a second block whose input and output widths match
    Tensor<double> x(1, 4, 2, 2, 2);
    std::normal_distribution<double> d;
    for (auto& v : x.data) v = d(rng);
    const auto y = net.run_encoder_block(2, 1, x);
    REQUIRE(y.shape == x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.data[i] == doctest::Approx(x.data[i]).epsilon(1e-12));
}

TEST_CASE("backward matches finite differences") {
    std::mt19937_64 rng(11);
    for (const auto& c : {tiny(2, 4, false), tiny(5, 16, true)}) {
        auto net = build_network<double>(c, 9);
        const auto x = random_input<double>(rng, 2, c);
        auto pass = net.forward_train(x);
        std::normal_distribution<double> d;
        Tensor<double> r(pass.output.logits.shape);
        for (auto& v : r.data) v = d(rng);
        std::vector<Tensor<double>> ra;
        for (const auto& a : pass.output.aux) {
            ra.emplace_back(a.shape);
            for (auto& v : ra.back().data) v = d(rng);
        }
        // L = <logits, r> + sum <aux_k, ra_k>
        auto loss = [&]() {
            const auto o = net.forward(x);
            double s = dot(o.logits.data, r.data);
            for (std::size_t k = 0; k < o.aux.size(); ++k) s += dot(o.aux[k].data, ra[k].data);
            return s;
        };
        const auto grads = net.backward(pass, r, ra);
        REQUIRE(grads.size() == net.parameters().size());
        std::uniform_int_distribution<std::size_t> pick(0, 1u << 30);
        int checked = 0;
        for (std::size_t p = 0; p < net.parameters().size(); ++p) {
            auto& value = net.parameters()[p].value;
            for (int k = 0; k < 3; ++k) {
                const std::size_t i = pick(rng) % value.size();
                const double h = 1e-5, orig = value[i];
                value[i] = orig + h;
                const double up = loss();
                value[i] = orig - h;
                const double down = loss();
                value[i] = orig;
                const double numeric = (up - down) / (2 * h);
                const double scale = std::max({1.0, std::abs(numeric), std::abs(grads[p][i])});
                CHECK_MESSAGE(std::abs(numeric - grads[p][i]) / scale < 1e-5, net.parameters()[p].name);
                ++checked;
            }
        }
        CHECK(checked > 20);
    }
}
