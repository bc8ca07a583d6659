#include "lesionseg/network.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <random>
#include <sstream>

#include "lesionseg/errors.hpp"
#include "lesionseg/rng.hpp"

namespace lesionseg::nn {

// ---------------------------------------------------------------------------
// Configuration

NetworkConfig NetworkConfig::paper() { return NetworkConfig{}; }

NetworkConfig NetworkConfig::toy() {
    NetworkConfig c;
    c.num_encoder_stages = 4;
    c.encoder_convs_per_stage = {1, 1, 1, 1};
    c.decoder_convs_per_stage = {1, 1, 1};
    c.base_features = 8;
    c.max_features = 32;
    c.patch_size = {32, 32, 32};
    c.deep_supervision = true;
    return c;
}

int NetworkConfig::features(int stage) const {
    std::int64_t f = base_features;
    for (int s = 0; s < stage && f < max_features; ++s) f *= 2;
    return static_cast<int>(std::min<std::int64_t>(f, max_features));
}

Index3 NetworkConfig::spatial_at(int level) const {
    Index3 s = patch_size;
    for (auto& v : s) v >>= level;
    return s;
}

std::vector<int> NetworkConfig::aux_decoder_stages() const {
    std::vector<int> out;
    if (!deep_supervision) return out;
    const int n_dec = num_encoder_stages - 1;
    // Every decoder resolution except the two coarsest; the finest one is the main head.
    for (int d = 2; d < n_dec - 1; ++d) out.push_back(d);
    return out;
}

void NetworkConfig::validate() const {
    if (input_channels < 1) throw ConfigError("input_channels must be >= 1");
    if (num_encoder_stages < 2) throw ConfigError("num_encoder_stages must be >= 2");
    if (static_cast<int>(encoder_convs_per_stage.size()) != num_encoder_stages)
        throw ConfigError("encoder_convs_per_stage needs one entry per encoder stage");
    if (static_cast<int>(decoder_convs_per_stage.size()) != num_encoder_stages - 1)
        throw ConfigError("decoder_convs_per_stage needs num_encoder_stages - 1 entries");
    for (int n : encoder_convs_per_stage)
        if (n < 1) throw ConfigError("every encoder stage needs at least one block");
    for (int n : decoder_convs_per_stage)
        if (n < 1) throw ConfigError("every decoder stage needs at least one convolution");
    if (base_features < 1 || max_features < base_features)
        throw ConfigError("features must satisfy 1 <= base_features <= max_features");
    const std::int64_t divisor = std::int64_t{1} << (num_encoder_stages - 1);
    for (auto p : patch_size)
        if (p < 1 || p % divisor != 0)
            throw ConfigError("patch dimension " + std::to_string(p) + " is not divisible by " +
                              std::to_string(divisor));
}

std::vector<StageRow> stage_report(const NetworkConfig& config) {
    config.validate();
    std::vector<StageRow> rows;
    for (int s = 0; s < config.num_encoder_stages; ++s)
        rows.push_back({"encoder", s, config.features(s), config.encoder_convs_per_stage[s],
                        config.spatial_at(s), false});
    const auto aux = config.aux_decoder_stages();
    for (int d = 0; d < config.num_encoder_stages - 1; ++d) {
        const int level = config.num_encoder_stages - 2 - d;
        rows.push_back({"decoder", d, config.features(level), config.decoder_convs_per_stage[d],
                        config.spatial_at(level),
                        std::find(aux.begin(), aux.end(), d) != aux.end()});
    }
    return rows;
}

std::string format_stage_report(const NetworkConfig& config) {
    std::ostringstream os;
    os << std::left << std::setw(9) << "part" << std::setw(7) << "stage" << std::setw(7) << "width"
       << std::setw(7) << "convs" << "spatial\n";
    for (const auto& r : stage_report(config)) {
        os << std::left << std::setw(9) << r.part << std::setw(7) << r.stage << std::setw(7) << r.width
           << std::setw(7) << r.convs << r.spatial[0] << "x" << r.spatial[1] << "x" << r.spatial[2]
           << (r.aux_head ? "  (aux head)" : "") << '\n';
    }
    os << "parameters: " << count_parameters(config) << '\n';
    return os.str();
}

std::int64_t count_parameters(const NetworkConfig& config) {
    config.validate();
    auto conv = [](std::int64_t in, std::int64_t out, std::int64_t k) { return out * in * k * k * k + out; };
    auto norm = [](std::int64_t c) { return 2 * c; };
    std::int64_t total = conv(config.input_channels, config.features(0), 3) + norm(config.features(0));
    for (int s = 0; s < config.num_encoder_stages; ++s) {
        const std::int64_t f = config.features(s);
        for (int b = 0; b < config.encoder_convs_per_stage[s]; ++b) {
            const std::int64_t in = b == 0 ? config.features(std::max(0, s - 1)) : f;
            const bool strided = b == 0 && s > 0;
            total += conv(in, f, 3) + norm(f) + conv(f, f, 3) + norm(f);
            if (strided || in != f) total += conv(in, f, 1) + norm(f);
        }
    }
    const auto aux = config.aux_decoder_stages();
    for (int d = 0; d < config.num_encoder_stages - 1; ++d) {
        const int level = config.num_encoder_stages - 2 - d;
        const std::int64_t f = config.features(level), below = config.features(level + 1);
        total += below * f * 8 + f;
        for (int j = 0; j < config.decoder_convs_per_stage[d]; ++j)
            total += conv(j == 0 ? 2 * f : f, f, 3) + norm(f);
        if (std::find(aux.begin(), aux.end(), d) != aux.end()) total += conv(f, kNumClasses, 1);
    }
    total += conv(config.features(0), kNumClasses, 1);
    return total;
}

// ---------------------------------------------------------------------------
// Autodiff tape

namespace detail {

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;

    Tensor<T>& ensure_grad() {
        if (grad.empty()) grad = Tensor<T>(value.shape);
        return grad;
    }
};

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
class Context {
public:
    Context(const std::vector<Parameter<T>>& p, bool rec) : params(&p), record(rec) {}

    const std::vector<Parameter<T>>* params;
    bool record;
    std::vector<std::function<void(Gradients<T>&)>> tape;

    const T* w(std::size_t idx) const { return (*params)[idx].value.data(); }
};

template <typename T>
NodePtr<T> make_node(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    return n;
}

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>>;

struct ConvGeometry {
    std::int64_t c, d, h, w;        // input
    std::int64_t od, oh, ow;        // output
    int k, stride, pad;
    std::int64_t rows() const { return c * k * k * k; }
    std::int64_t cols() const { return od * oh * ow; }
};

ConvGeometry conv_geometry(const std::array<std::int64_t, 5>& in, int k, int stride) {
    ConvGeometry g{in[1], in[2], in[3], in[4], 0, 0, 0, k, stride, k / 2};
    g.od = (g.d + 2 * g.pad - k) / stride + 1;
    g.oh = (g.h + 2 * g.pad - k) / stride + 1;
    g.ow = (g.w + 2 * g.pad - k) / stride + 1;
    return g;
}

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
    const std::int64_t plane = g.od * g.oh * g.ow;
    std::int64_t row = 0;
    for (std::int64_t c = 0; c < g.c; ++c) {
        const T* xc = x + c * g.d * g.h * g.w;
        for (int kz = 0; kz < g.k; ++kz)
            for (int ky = 0; ky < g.k; ++ky)
                for (int kx = 0; kx < g.k; ++kx, ++row) {
                    T* out = col + row * plane;
                    for (std::int64_t oz = 0; oz < g.od; ++oz) {
                        const std::int64_t iz = oz * g.stride - g.pad + kz;
                        for (std::int64_t oy = 0; oy < g.oh; ++oy) {
                            const std::int64_t iy = oy * g.stride - g.pad + ky;
                            T* o = out + (oz * g.oh + oy) * g.ow;
                            if (iz < 0 || iz >= g.d || iy < 0 || iy >= g.h) {
                                std::fill(o, o + g.ow, T(0));
                                continue;
                            }
                            const T* src = xc + (iz * g.h + iy) * g.w;
                            if (g.stride == 1) {
                                const std::int64_t shift = kx - g.pad;
                                for (std::int64_t ox = 0; ox < g.ow; ++ox) {
                                    const std::int64_t ix = ox + shift;
                                    o[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
                                }
                            } else {
                                for (std::int64_t ox = 0; ox < g.ow; ++ox) {
                                    const std::int64_t ix = ox * g.stride - g.pad + kx;
                                    o[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
                                }
                            }
                        }
                    }
                }
    }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* dx) {
    const std::int64_t plane = g.od * g.oh * g.ow;
    std::int64_t row = 0;
    for (std::int64_t c = 0; c < g.c; ++c) {
        T* xc = dx + c * g.d * g.h * g.w;
        for (int kz = 0; kz < g.k; ++kz)
            for (int ky = 0; ky < g.k; ++ky)
                for (int kx = 0; kx < g.k; ++kx, ++row) {
                    const T* in = col + row * plane;
                    for (std::int64_t oz = 0; oz < g.od; ++oz) {
                        const std::int64_t iz = oz * g.stride - g.pad + kz;
                        if (iz < 0 || iz >= g.d) continue;
                        for (std::int64_t oy = 0; oy < g.oh; ++oy) {
                            const std::int64_t iy = oy * g.stride - g.pad + ky;
                            if (iy < 0 || iy >= g.h) continue;
                            const T* i = in + (oz * g.oh + oy) * g.ow;
                            T* dst = xc + (iz * g.h + iy) * g.w;
                            for (std::int64_t ox = 0; ox < g.ow; ++ox) {
                                const std::int64_t ix = ox * g.stride - g.pad + kx;
                                if (ix >= 0 && ix < g.w) dst[ix] += i[ox];
                            }
                        }
                    }
                }
    }
}

template <typename T>
NodePtr<T> conv(Context<T>& ctx, const NodePtr<T>& x, const ConvSpec& spec) {
    const auto& in = x->value;
    if (in.channels() != spec.in) throw ShapeError("convolution input channel mismatch");
    const ConvGeometry g = conv_geometry(in.shape, spec.kernel, spec.stride);
    const std::int64_t n_batch = in.batch();
    Tensor<T> out(n_batch, spec.out, g.od, g.oh, g.ow);
    const bool direct = spec.kernel == 1 && spec.stride == 1;
    std::vector<T> col(direct ? 0 : static_cast<std::size_t>(g.rows() * g.cols()));
    CMapRM<T> W(ctx.w(spec.weight), spec.out, g.rows());
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(ctx.w(spec.bias), spec.out);
    for (std::int64_t n = 0; n < n_batch; ++n) {
        const T* xn = in.channel_ptr(n, 0);
        if (!direct) im2col(xn, g, col.data());
        CMapRM<T> C(direct ? xn : col.data(), g.rows(), g.cols());
        MapRM<T> O(out.channel_ptr(n, 0), spec.out, g.cols());
        O.noalias() = W * C;
        O.colwise() += b;
    }
    auto y = make_node(std::move(out));
    if (ctx.record) {
        const auto* params = ctx.params;
        ctx.tape.push_back([x, y, spec, g, params, direct](Gradients<T>& grads) {
            if (y->grad.empty()) return;
            const auto& xin = x->value;
            auto& dx = x->ensure_grad();
            CMapRM<T> W((*params)[spec.weight].value.data(), spec.out, g.rows());
            MapRM<T> dW(grads[spec.weight].data(), spec.out, g.rows());
            Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> db(grads[spec.bias].data(), spec.out);
            std::vector<T> col(direct ? 0 : static_cast<std::size_t>(g.rows() * g.cols()));
            std::vector<T> dcol(direct ? 0 : col.size());
            for (std::int64_t n = 0; n < xin.batch(); ++n) {
                const T* xn = xin.channel_ptr(n, 0);
                if (!direct) im2col(xn, g, col.data());
                CMapRM<T> C(direct ? xn : col.data(), g.rows(), g.cols());
                CMapRM<T> dO(y->grad.channel_ptr(n, 0), spec.out, g.cols());
                dW.noalias() += dO * C.transpose();
                // plain loop: Eigen's vectorised row sums peel by address, so results drift with alignment
                for (std::int64_t o = 0; o < spec.out; ++o) {
                    const T* row = y->grad.channel_ptr(n, o);
                    T acc = T(0);
                    for (std::int64_t i = 0; i < g.cols(); ++i) acc += row[i];
                    db[o] += acc;
                }
                if (direct) {
                    MapRM<T> dX(dx.channel_ptr(n, 0), g.rows(), g.cols());
                    dX.noalias() += W.transpose() * dO;
                } else {
                    MapRM<T> dC(dcol.data(), g.rows(), g.cols());
                    dC.noalias() = W.transpose() * dO;
                    col2im(dcol.data(), g, dx.channel_ptr(n, 0));
                }
            }
        });
    }
    return y;
}

template <typename T>
NodePtr<T> instance_norm(Context<T>& ctx, const NodePtr<T>& x, const NormSpec& spec) {
    const auto& in = x->value;
    const std::int64_t N = in.batch(), C = in.channels(), M = in.spatial_size();
    Tensor<T> out(in.shape);
    auto stats = std::make_shared<std::vector<T>>(static_cast<std::size_t>(2 * N * C));
    const T* gamma = ctx.w(spec.gamma);
    const T* beta = ctx.w(spec.beta);
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const T* xp = in.channel_ptr(n, c);
            T* yp = out.channel_ptr(n, c);
            double mean = 0.0;
            for (std::int64_t i = 0; i < M; ++i) mean += xp[i];
            mean /= static_cast<double>(M);
            double var = 0.0;
            for (std::int64_t i = 0; i < M; ++i) var += (xp[i] - mean) * (xp[i] - mean);
            var /= static_cast<double>(M);
            const T inv = static_cast<T>(1.0 / std::sqrt(var + kNormEps));
            const T m = static_cast<T>(mean);
            (*stats)[static_cast<std::size_t>(2 * (n * C + c))] = m;
            (*stats)[static_cast<std::size_t>(2 * (n * C + c) + 1)] = inv;
            for (std::int64_t i = 0; i < M; ++i) yp[i] = gamma[c] * ((xp[i] - m) * inv) + beta[c];
        }
    auto y = make_node(std::move(out));
    if (ctx.record) {
        const auto* params = ctx.params;
        ctx.tape.push_back([x, y, spec, stats, params](Gradients<T>& grads) {
            if (y->grad.empty()) return;
            const auto& xin = x->value;
            auto& dx = x->ensure_grad();
            const std::int64_t N = xin.batch(), C = xin.channels(), M = xin.spatial_size();
            const T* gamma = (*params)[spec.gamma].value.data();
            T* dgamma = grads[spec.gamma].data();
            T* dbeta = grads[spec.beta].data();
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t c = 0; c < C; ++c) {
                    const T m = (*stats)[static_cast<std::size_t>(2 * (n * C + c))];
                    const T inv = (*stats)[static_cast<std::size_t>(2 * (n * C + c) + 1)];
                    const T* xp = xin.channel_ptr(n, c);
                    const T* dy = y->grad.channel_ptr(n, c);
                    T* dxp = dx.channel_ptr(n, c);
                    double sum_dy = 0.0, sum_dy_xhat = 0.0;
                    for (std::int64_t i = 0; i < M; ++i) {
                        const double xhat = (xp[i] - m) * inv;
                        sum_dy += dy[i];
                        sum_dy_xhat += dy[i] * xhat;
                    }
                    dgamma[c] += static_cast<T>(sum_dy_xhat);
                    dbeta[c] += static_cast<T>(sum_dy);
                    const double g = gamma[c];
                    const double mean_dxhat = g * sum_dy / static_cast<double>(M);
                    const double mean_dxhat_xhat = g * sum_dy_xhat / static_cast<double>(M);
                    for (std::int64_t i = 0; i < M; ++i) {
                        const double xhat = (xp[i] - m) * inv;
                        dxp[i] += static_cast<T>(inv * (g * dy[i] - mean_dxhat - xhat * mean_dxhat_xhat));
                    }
                }
        });
    }
    return y;
}

template <typename T>
NodePtr<T> leaky_relu(Context<T>& ctx, const NodePtr<T>& x) {
    Tensor<T> out(x->value.shape);
    const T slope = static_cast<T>(kLeakySlope);
    const auto& in = x->value.data;
    for (std::size_t i = 0; i < in.size(); ++i) out.data[i] = in[i] > T(0) ? in[i] : slope * in[i];
    auto y = make_node(std::move(out));
    if (ctx.record) {
        ctx.tape.push_back([x, y, slope](Gradients<T>&) {
            if (y->grad.empty()) return;
            auto& dx = x->ensure_grad();
            const auto& in = x->value.data;
            for (std::size_t i = 0; i < in.size(); ++i)
                dx.data[i] += in[i] > T(0) ? y->grad.data[i] : slope * y->grad.data[i];
        });
    }
    return y;
}

template <typename T>
NodePtr<T> add(Context<T>& ctx, const NodePtr<T>& a, const NodePtr<T>& b) {
    if (a->value.shape != b->value.shape) throw ShapeError("residual add shape mismatch");
    Tensor<T> out(a->value.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a->value.data[i] + b->value.data[i];
    auto y = make_node(std::move(out));
    if (ctx.record) {
        ctx.tape.push_back([a, b, y](Gradients<T>&) {
            if (y->grad.empty()) return;
            auto& da = a->ensure_grad();
            for (std::size_t i = 0; i < da.data.size(); ++i) da.data[i] += y->grad.data[i];
            auto& db = b->ensure_grad();
            for (std::size_t i = 0; i < db.data.size(); ++i) db.data[i] += y->grad.data[i];
        });
    }
    return y;
}

template <typename T>
NodePtr<T> concat_channels(Context<T>& ctx, const NodePtr<T>& a, const NodePtr<T>& b) {
    const auto& sa = a->value.shape;
    const auto& sb = b->value.shape;
    if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] || sa[4] != sb[4])
        throw ShapeError("skip concatenation shape mismatch");
    Tensor<T> out(sa[0], sa[1] + sb[1], sa[2], sa[3], sa[4]);
    const std::int64_t M = a->value.spatial_size();
    for (std::int64_t n = 0; n < sa[0]; ++n) {
        std::copy_n(a->value.channel_ptr(n, 0), sa[1] * M, out.channel_ptr(n, 0));
        std::copy_n(b->value.channel_ptr(n, 0), sb[1] * M, out.channel_ptr(n, sa[1]));
    }
    auto y = make_node(std::move(out));
    if (ctx.record) {
        ctx.tape.push_back([a, b, y, M](Gradients<T>&) {
            if (y->grad.empty()) return;
            auto& da = a->ensure_grad();
            auto& db = b->ensure_grad();
            const std::int64_t ca = da.channels(), cb = db.channels();
            for (std::int64_t n = 0; n < da.batch(); ++n) {
                const T* src = y->grad.channel_ptr(n, 0);
                T* pa = da.channel_ptr(n, 0);
                for (std::int64_t i = 0; i < ca * M; ++i) pa[i] += src[i];
                const T* srcb = y->grad.channel_ptr(n, ca);
                T* pb = db.channel_ptr(n, 0);
                for (std::int64_t i = 0; i < cb * M; ++i) pb[i] += srcb[i];
            }
        });
    }
    return y;
}

// Transposed convolution, kernel 2, stride 2. Weight layout (in, out, 2, 2, 2).
template <typename T>
NodePtr<T> upsample(Context<T>& ctx, const NodePtr<T>& x, const UpSpec& spec) {
    const auto& in = x->value;
    if (in.channels() != spec.in) throw ShapeError("upsampling input channel mismatch");
    const std::int64_t N = in.batch(), D = in.shape[2], H = in.shape[3], W = in.shape[4];
    const std::int64_t P = D * H * W;
    Tensor<T> out(N, spec.out, 2 * D, 2 * H, 2 * W);
    CMapRM<T> Wm(ctx.w(spec.weight), spec.in, spec.out * 8);
    const T* bias = ctx.w(spec.bias);
    MatRM<T> Y(spec.out * 8, P);
    for (std::int64_t n = 0; n < N; ++n) {
        CMapRM<T> X(in.channel_ptr(n, 0), spec.in, P);
        Y.noalias() = Wm.transpose() * X;
        for (std::int64_t co = 0; co < spec.out; ++co)
            for (int k = 0; k < 8; ++k) {
                const int a = k >> 2, bb = (k >> 1) & 1, c = k & 1;
                const T* row = Y.data() + (co * 8 + k) * P;
                for (std::int64_t z = 0; z < D; ++z)
                    for (std::int64_t y = 0; y < H; ++y)
                        for (std::int64_t xx = 0; xx < W; ++xx)
                            out.at(n, co, 2 * z + a, 2 * y + bb, 2 * xx + c) =
                                row[(z * H + y) * W + xx] + bias[co];
            }
    }
    auto y = make_node(std::move(out));
    if (ctx.record) {
        const auto* params = ctx.params;
        ctx.tape.push_back([x, y, spec, params, D, H, W, P](Gradients<T>& grads) {
            if (y->grad.empty()) return;
            const auto& xin = x->value;
            auto& dx = x->ensure_grad();
            CMapRM<T> Wm((*params)[spec.weight].value.data(), spec.in, spec.out * 8);
            MapRM<T> dW(grads[spec.weight].data(), spec.in, spec.out * 8);
            T* db = grads[spec.bias].data();
            MatRM<T> dY(spec.out * 8, P);
            for (std::int64_t n = 0; n < xin.batch(); ++n) {
                for (std::int64_t co = 0; co < spec.out; ++co) {
                    double bsum = 0.0;
                    for (int k = 0; k < 8; ++k) {
                        const int a = k >> 2, bb = (k >> 1) & 1, c = k & 1;
                        T* row = dY.data() + (co * 8 + k) * P;
                        for (std::int64_t z = 0; z < D; ++z)
                            for (std::int64_t yy = 0; yy < H; ++yy)
                                for (std::int64_t xx = 0; xx < W; ++xx) {
                                    const T g = y->grad.at(n, co, 2 * z + a, 2 * yy + bb, 2 * xx + c);
                                    row[(z * H + yy) * W + xx] = g;
                                    bsum += g;
                                }
                    }
                    db[co] += static_cast<T>(bsum);
                }
                CMapRM<T> X(xin.channel_ptr(n, 0), spec.in, P);
                dW.noalias() += X * dY.transpose();
                MapRM<T> dX(dx.channel_ptr(n, 0), spec.in, P);
                dX.noalias() += Wm * dY;
            }
        });
    }
    return y;
}

template <typename T>
NodePtr<T> residual_block(Context<T>& ctx, const NodePtr<T>& x, const ResidualBlock& blk) {
    auto r = conv(ctx, x, blk.conv1);
    r = instance_norm(ctx, r, blk.norm1);
    r = leaky_relu(ctx, r);
    r = conv(ctx, r, blk.conv2);
    r = instance_norm(ctx, r, blk.norm2);
    NodePtr<T> skip = x;
    if (blk.proj) skip = instance_norm(ctx, conv(ctx, x, *blk.proj), *blk.proj_norm);
    return add(ctx, r, skip);
}

template <typename T>
NodePtr<T> conv_norm_act(Context<T>& ctx, const NodePtr<T>& x, const ConvNormAct& layer) {
    return leaky_relu(ctx, instance_norm(ctx, conv(ctx, x, layer.conv), layer.norm));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// UNet

template <typename T>
UNet<T>::Pass::Pass() = default;
template <typename T>
UNet<T>::Pass::~Pass() = default;
template <typename T>
UNet<T>::Pass::Pass(Pass&&) noexcept = default;
template <typename T>
typename UNet<T>::Pass& UNet<T>::Pass::operator=(Pass&&) noexcept = default;

template <typename T>
std::size_t UNet<T>::add_param(std::string name, std::vector<std::int64_t> shape) {
    std::int64_t n = 1;
    for (auto s : shape) n *= s;
    params_.push_back({std::move(name), std::move(shape), std::vector<T>(static_cast<std::size_t>(n), T(0))});
    return params_.size() - 1;
}

template <typename T>
ConvSpec UNet<T>::make_conv(const std::string& name, int in, int out, int kernel, int stride) {
    ConvSpec c{in, out, kernel, stride, 0, 0};
    c.weight = add_param(name + ".weight", {out, in, kernel, kernel, kernel});
    c.bias = add_param(name + ".bias", {out});
    return c;
}

template <typename T>
NormSpec UNet<T>::make_norm(const std::string& name, int channels) {
    NormSpec n{channels, 0, 0};
    n.gamma = add_param(name + ".weight", {channels});
    n.beta = add_param(name + ".bias", {channels});
    return n;
}

template <typename T>
UNet<T>::UNet(NetworkConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    const int S = config_.num_encoder_stages;
    stem_.conv = make_conv("encoder.stem.conv", config_.input_channels, config_.features(0), 3, 1);
    stem_.norm = make_norm("encoder.stem.norm", config_.features(0));
    encoder_.resize(static_cast<std::size_t>(S));
    for (int s = 0; s < S; ++s) {
        const int f = config_.features(s);
        for (int b = 0; b < config_.encoder_convs_per_stage[s]; ++b) {
            const std::string p = "encoder.stage" + std::to_string(s) + ".block" + std::to_string(b);
            const int in = b == 0 ? config_.features(std::max(0, s - 1)) : f;
            const int stride = (b == 0 && s > 0) ? 2 : 1;
            ResidualBlock blk;
            blk.conv1 = make_conv(p + ".conv1", in, f, 3, stride);
            blk.norm1 = make_norm(p + ".norm1", f);
            blk.conv2 = make_conv(p + ".conv2", f, f, 3, 1);
            blk.norm2 = make_norm(p + ".norm2", f);
            if (stride != 1 || in != f) {
                blk.proj = make_conv(p + ".proj.conv", in, f, 1, stride);
                blk.proj_norm = make_norm(p + ".proj.norm", f);
            }
            encoder_[static_cast<std::size_t>(s)].push_back(blk);
        }
    }
    const auto aux = config_.aux_decoder_stages();
    for (int d = 0; d < S - 1; ++d) {
        const std::string p = "decoder.stage" + std::to_string(d);
        DecoderStage st;
        st.level = S - 2 - d;
        const int f = config_.features(st.level), below = config_.features(st.level + 1);
        st.up = UpSpec{below, f, add_param(p + ".up.weight", {below, f, 2, 2, 2}), 0};
        st.up.bias = add_param(p + ".up.bias", {f});
        for (int j = 0; j < config_.decoder_convs_per_stage[d]; ++j) {
            ConvNormAct l;
            l.conv = make_conv(p + ".conv" + std::to_string(j), j == 0 ? 2 * f : f, f, 3, 1);
            l.norm = make_norm(p + ".norm" + std::to_string(j), f);
            st.convs.push_back(l);
        }
        if (std::find(aux.begin(), aux.end(), d) != aux.end())
            st.aux_head = make_conv(p + ".aux_head", f, kNumClasses, 1, 1);
        decoder_.push_back(std::move(st));
    }
    head_ = make_conv("head", config_.features(0), kNumClasses, 1, 1);
    init_weights(seed);
}

template <typename T>
void UNet<T>::init_weights(std::uint64_t seed) {
    Rng rng(derive_seed(seed, hash_string("init_weights")));
    const double gain = 2.0 / (1.0 + kLeakySlope * kLeakySlope);
    for (auto& p : params_) {
        const bool is_bias = p.name.size() >= 5 && p.name.compare(p.name.size() - 5, 5, ".bias") == 0;
        const bool is_norm = p.name.find("norm") != std::string::npos;
        if (is_norm && !is_bias) {
            std::fill(p.value.begin(), p.value.end(), T(1));
        } else if (is_bias) {
            std::fill(p.value.begin(), p.value.end(), T(0));
        } else {
            // Fan-in: conv weights are (out, in, k, k, k); up weights are (in, out, 2, 2, 2).
            const bool is_up = p.name.find(".up.") != std::string::npos;
            std::int64_t fan_in = is_up ? p.shape[0] : p.shape[1] * p.shape[2] * p.shape[3] * p.shape[4];
            std::normal_distribution<double> dist(0.0, std::sqrt(gain / static_cast<double>(fan_in)));
            for (auto& v : p.value) v = static_cast<T>(dist(rng));
        }
    }
}

template <typename T>
std::int64_t UNet<T>::count_parameters() const noexcept {
    std::int64_t n = 0;
    for (const auto& p : params_) n += static_cast<std::int64_t>(p.value.size());
    return n;
}

template <typename T>
Gradients<T> UNet<T>::zero_gradients() const {
    Gradients<T> g;
    g.reserve(params_.size());
    for (const auto& p : params_) g.emplace_back(p.value.size(), T(0));
    return g;
}

template <typename T>
void UNet<T>::run(detail::Context<T>& ctx, const Tensor<T>& input,
                  std::shared_ptr<detail::Node<T>>& logits,
                  std::vector<std::shared_ptr<detail::Node<T>>>& aux) const {
    if (input.shape[1] != config_.input_channels || input.shape[2] != config_.patch_size[0] ||
        input.shape[3] != config_.patch_size[1] || input.shape[4] != config_.patch_size[2] ||
        input.shape[0] < 1)
        throw ShapeError("network input must be N x " + std::to_string(config_.input_channels) +
                         " x patch_size");
    auto h = detail::make_node(input);
    h = detail::conv_norm_act(ctx, h, stem_);
    std::vector<detail::NodePtr<T>> skips;
    for (const auto& stage : encoder_) {
        for (const auto& blk : stage) h = detail::residual_block(ctx, h, blk);
        skips.push_back(h);
    }
    for (const auto& st : decoder_) {
        auto up = detail::upsample(ctx, h, st.up);
        h = detail::concat_channels(ctx, up, skips[static_cast<std::size_t>(st.level)]);
        for (const auto& l : st.convs) h = detail::conv_norm_act(ctx, h, l);
        if (st.aux_head) aux.push_back(detail::conv(ctx, h, *st.aux_head));
    }
    logits = detail::conv(ctx, h, head_);
}

template <typename T>
typename UNet<T>::Output UNet<T>::forward(const Tensor<T>& input) const {
    detail::Context<T> ctx(params_, false);
    std::shared_ptr<detail::Node<T>> logits;
    std::vector<std::shared_ptr<detail::Node<T>>> aux;
    run(ctx, input, logits, aux);
    Output out;
    out.logits = std::move(logits->value);
    for (std::size_t i = 0; i < aux.size(); ++i) {
        out.aux_factors.push_back(static_cast<int>(input.shape[2] / aux[i]->value.shape[2]));
        out.aux.push_back(std::move(aux[i]->value));
    }
    return out;
}

template <typename T>
typename UNet<T>::Pass UNet<T>::forward_train(const Tensor<T>& input) const {
    Pass pass;
    pass.ctx_ = std::make_unique<detail::Context<T>>(params_, true);
    run(*pass.ctx_, input, pass.logits_node_, pass.aux_nodes_);
    pass.output.logits = pass.logits_node_->value;
    for (const auto& a : pass.aux_nodes_) {
        pass.output.aux_factors.push_back(static_cast<int>(input.shape[2] / a->value.shape[2]));
        pass.output.aux.push_back(a->value);
    }
    return pass;
}

template <typename T>
Gradients<T> UNet<T>::backward(Pass& pass, const Tensor<T>& d_logits,
                               const std::vector<Tensor<T>>& d_aux) const {
    if (!pass.ctx_) throw Error("backward called on an empty pass");
    if (d_logits.shape != pass.logits_node_->value.shape) throw ShapeError("logit gradient shape mismatch");
    pass.logits_node_->grad = d_logits;
    for (std::size_t i = 0; i < d_aux.size() && i < pass.aux_nodes_.size(); ++i) {
        if (d_aux[i].empty()) continue;
        if (d_aux[i].shape != pass.aux_nodes_[i]->value.shape) throw ShapeError("aux gradient shape mismatch");
        pass.aux_nodes_[i]->grad = d_aux[i];
    }
    Gradients<T> grads = zero_gradients();
    auto& tape = pass.ctx_->tape;
    for (auto it = tape.rbegin(); it != tape.rend(); ++it) (*it)(grads);
    tape.clear();
    return grads;
}

template <typename T>
Tensor<T> UNet<T>::run_encoder_block(int stage, int block, const Tensor<T>& input) const {
    detail::Context<T> ctx(params_, false);
    auto x = detail::make_node(input);
    return detail::residual_block(ctx, x, encoder_.at(static_cast<std::size_t>(stage))
                                              .at(static_cast<std::size_t>(block)))
        ->value;
}

template <typename T>
void UNet<T>::zero_final_block_convs() {
    for (const auto& stage : encoder_)
        for (const auto& blk : stage) {
            std::fill(params_[blk.conv2.weight].value.begin(), params_[blk.conv2.weight].value.end(), T(0));
            std::fill(params_[blk.conv2.bias].value.begin(), params_[blk.conv2.bias].value.end(), T(0));
        }
}

template class UNet<float>;
template class UNet<double>;

}  // namespace lesionseg::nn
