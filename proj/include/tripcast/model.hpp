#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tripcast/errors.hpp"
#include "tripcast/linalg.hpp"
#include "tripcast/mask_matrix.hpp"
#include "tripcast/rng.hpp"

namespace tripcast {

enum class PeMode { sinusoidal, learned, none };

inline std::string to_string(PeMode mode) {
    switch (mode) {
        case PeMode::sinusoidal: return "sinusoidal";
        case PeMode::learned: return "learned";
        case PeMode::none: return "none";
    }
    throw DomainError("invalid pe_mode");
}

inline PeMode pe_mode_from_string(const std::string& s) {
    if (s == "sinusoidal") return PeMode::sinusoidal;
    if (s == "learned") return PeMode::learned;
    if (s == "none") return PeMode::none;
    throw ConfigError("unknown pe_mode '" + s + "'");
}

/// Architecture hyperparameters. The window is H x C cells; cells carry one
/// value channel plus `covariate_channels` date features; P x P cell patches
/// become transformer tokens.
struct ModelConfig {
    int num_layers = 4;
    int d_model = 128;
    int num_heads = 4;
    int d_ff = 0;  ///< 0 means 4 * d_model
    int patch_size = 4;
    int H = 60;
    int C = 40;
    int covariate_channels = 21;
    int output_channels = 1;
    PeMode pe_mode = PeMode::sinusoidal;
    double eps = 1e-5;
    double dropout = 0.0;

    int ff_width() const { return d_ff > 0 ? d_ff : 4 * d_model; }
    int head_dim() const { return d_model / num_heads; }
    int tokens() const { return (H / patch_size) * (C / patch_size); }
    int patch_dim() const { return patch_size * patch_size * d_model; }
    int patch_out() const { return patch_size * patch_size * output_channels; }
    int input_channels() const { return 1 + covariate_channels; }

    void validate() const {
        if (num_layers < 1 || d_model < 1 || num_heads < 1 || patch_size < 1 ||
            H < 1 || C < 1 || covariate_channels < 0) {
            throw ConfigError("model dimensions must be positive");
        }
        if (output_channels != 1) {
            throw ConfigError("output_channels is fixed to 1 (univariate)");
        }
        if (d_model % num_heads != 0) {
            throw ConfigError("d_model must be divisible by num_heads");
        }
        if (H % patch_size != 0 || C % patch_size != 0) {
            throw ConfigError("H and C must be divisible by patch_size");
        }
        if (pe_mode == PeMode::sinusoidal && d_model % 2 != 0) {
            throw ConfigError("sinusoidal positional encoding needs even d_model");
        }
        if (!(eps > 0.0)) throw ConfigError("eps must be positive");
        if (!(dropout >= 0.0 && dropout < 1.0)) {
            throw ConfigError("dropout must be in [0, 1)");
        }
    }

    // Named sizes from the published configuration table. Patch size 2 keeps
    // the patch-embedding matrix in line with the reported parameter budgets.
    static ModelConfig small_preset() {
        ModelConfig cfg;
        cfg.num_layers = 4; cfg.d_model = 128; cfg.num_heads = 4; cfg.patch_size = 2;
        return cfg;
    }
    static ModelConfig base_preset() {
        ModelConfig cfg;
        cfg.num_layers = 4; cfg.d_model = 256; cfg.num_heads = 8; cfg.patch_size = 2;
        return cfg;
    }
    static ModelConfig large_preset() {
        ModelConfig cfg;
        cfg.num_layers = 6; cfg.d_model = 512; cfg.num_heads = 8; cfg.patch_size = 2;
        return cfg;
    }
    /// Desk-scale configuration for CPU training runs.
    static ModelConfig tiny_preset() {
        ModelConfig cfg;
        cfg.num_layers = 2; cfg.d_model = 64; cfg.num_heads = 4; cfg.patch_size = 4;
        return cfg;
    }

    std::map<std::string, std::string> to_kv() const {
        std::map<std::string, std::string> kv;
        kv["num_layers"] = std::to_string(num_layers);
        kv["d_model"] = std::to_string(d_model);
        kv["num_heads"] = std::to_string(num_heads);
        kv["d_ff"] = std::to_string(ff_width());
        kv["patch_size"] = std::to_string(patch_size);
        kv["H"] = std::to_string(H);
        kv["C"] = std::to_string(C);
        kv["covariate_channels"] = std::to_string(covariate_channels);
        kv["output_channels"] = std::to_string(output_channels);
        kv["pe_mode"] = to_string(pe_mode);
        kv["eps"] = std::to_string(eps);
        kv["dropout"] = std::to_string(dropout);
        return kv;
    }

    bool operator==(const ModelConfig& o) const {
        return num_layers == o.num_layers && d_model == o.d_model &&
               num_heads == o.num_heads && ff_width() == o.ff_width() &&
               patch_size == o.patch_size && H == o.H && C == o.C &&
               covariate_channels == o.covariate_channels &&
               output_channels == o.output_channels && pe_mode == o.pe_mode;
    }
};

/// Per-instance normalization statistics; stdev is already clamped to eps.
template <class T>
struct NormStats {
    T mean = T(0);
    T stdev = T(1);
};

/// All trainable arrays of one model. Also reused, shape-for-shape, as the
/// gradient accumulator and as the optimizer moment buffers. Tensors are
/// visited in a fixed canonical order, which defines the checkpoint manifest
/// order and the optimizer pairing.
template <class T>
struct ParameterStore {
    struct Layer {
        Mat<T> wq, bq, wk, bk, wv, bv, wo, bo;
        Mat<T> norm1_gamma, norm1_beta;
        Mat<T> w1, b1, w2, b2;
        Mat<T> norm2_gamma, norm2_beta;
    };

    Mat<T> input_w, input_b;
    Mat<T> mask_token;
    Mat<T> patch_w, patch_b;
    Mat<T> pos_table;  ///< present only with learned positional encoding
    std::vector<Layer> layers;
    Mat<T> recon_w, recon_b;

    template <class F>
    void visit(F&& f) {
        visit_impl(*this, f);
    }
    template <class F>
    void visit(F&& f) const {
        visit_impl(*this, f);
    }

    /// Same shapes, all zeros.
    ParameterStore like() const {
        ParameterStore out;
        out.layers.resize(layers.size());
        if (pos_table.size() > 0) out.pos_table.setZero(pos_table.rows(), pos_table.cols());
        out.visit_pairwise(*this, [](Mat<T>& dst, const Mat<T>& src) {
            dst.setZero(src.rows(), src.cols());
        });
        return out;
    }

    template <class F>
    void visit_pairwise(const ParameterStore& other, F&& f) {
        std::vector<Mat<T>*> mine;
        std::vector<const Mat<T>*> theirs;
        visit([&](const char*, Mat<T>& m) { mine.push_back(&m); });
        other.visit([&](const char*, const Mat<T>& m) { theirs.push_back(&m); });
        if (mine.size() != theirs.size()) throw DomainError("parameter store shape mismatch");
        for (std::size_t i = 0; i < mine.size(); ++i) f(*mine[i], *theirs[i]);
    }

    void set_zero() {
        visit([](const char*, Mat<T>& m) { m.setZero(); });
    }

    std::int64_t scalar_count() const {
        std::int64_t n = 0;
        visit([&](const char*, const Mat<T>& m) { n += m.size(); });
        return n;
    }

    bool all_finite() const {
        bool ok = true;
        visit([&](const char*, const Mat<T>& m) { ok = ok && m.allFinite(); });
        return ok;
    }

private:
    template <class Self, class F>
    static void visit_impl(Self& self, F& f) {
        f("input_proj.weight", self.input_w);
        f("input_proj.bias", self.input_b);
        f("mask_token", self.mask_token);
        f("patch_embed.weight", self.patch_w);
        f("patch_embed.bias", self.patch_b);
        if (self.pos_table.size() > 0) f("pos_table", self.pos_table);
        for (std::size_t i = 0; i < self.layers.size(); ++i) {
            auto& layer = self.layers[i];
            const std::string p = "layers." + std::to_string(i) + ".";
            f((p + "attn.query.weight").c_str(), layer.wq);
            f((p + "attn.query.bias").c_str(), layer.bq);
            f((p + "attn.key.weight").c_str(), layer.wk);
            f((p + "attn.key.bias").c_str(), layer.bk);
            f((p + "attn.value.weight").c_str(), layer.wv);
            f((p + "attn.value.bias").c_str(), layer.bv);
            f((p + "attn.out.weight").c_str(), layer.wo);
            f((p + "attn.out.bias").c_str(), layer.bo);
            f((p + "norm1.gamma").c_str(), layer.norm1_gamma);
            f((p + "norm1.beta").c_str(), layer.norm1_beta);
            f((p + "ffn.hidden.weight").c_str(), layer.w1);
            f((p + "ffn.hidden.bias").c_str(), layer.b1);
            f((p + "ffn.out.weight").c_str(), layer.w2);
            f((p + "ffn.out.bias").c_str(), layer.b2);
            f((p + "norm2.gamma").c_str(), layer.norm2_gamma);
            f((p + "norm2.beta").c_str(), layer.norm2_beta);
        }
        f("recon.weight", self.recon_w);
        f("recon.bias", self.recon_b);
    }
};

/// Zero-valued store with the shapes dictated by the config.
template <class T>
ParameterStore<T> make_parameter_store(const ModelConfig& cfg) {
    cfg.validate();
    const int d = cfg.d_model, dff = cfg.ff_width();
    ParameterStore<T> p;
    p.input_w.setZero(cfg.input_channels(), d);
    p.input_b.setZero(1, d);
    p.mask_token.setZero(1, d);
    p.patch_w.setZero(cfg.patch_dim(), d);
    p.patch_b.setZero(1, d);
    if (cfg.pe_mode == PeMode::learned) p.pos_table.setZero(cfg.tokens(), d);
    p.layers.resize(cfg.num_layers);
    for (auto& layer : p.layers) {
        layer.wq.setZero(d, d); layer.bq.setZero(1, d);
        layer.wk.setZero(d, d); layer.bk.setZero(1, d);
        layer.wv.setZero(d, d); layer.bv.setZero(1, d);
        layer.wo.setZero(d, d); layer.bo.setZero(1, d);
        layer.norm1_gamma.setZero(1, d); layer.norm1_beta.setZero(1, d);
        layer.w1.setZero(d, dff); layer.b1.setZero(1, dff);
        layer.w2.setZero(dff, d); layer.b2.setZero(1, d);
        layer.norm2_gamma.setZero(1, d); layer.norm2_beta.setZero(1, d);
    }
    p.recon_w.setZero(d, cfg.patch_out());
    p.recon_b.setZero(1, cfg.patch_out());
    return p;
}

/// Exact number of trainable scalars for a config.
inline std::int64_t count_parameters(const ModelConfig& cfg) {
    return make_parameter_store<float>(cfg).scalar_count();
}

/// Seeded Xavier-uniform initialization; norm gains start at one, biases at
/// zero, mask token and learned positional table at small normal noise.
template <class T>
ParameterStore<T> init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
    ParameterStore<T> p = make_parameter_store<T>(cfg);
    std::uint64_t index = 0;
    p.visit([&](const char* name, Mat<T>& m) {
        Rng rng(derive_seed(seed, 0x1417u, index++));
        const std::string n(name);
        auto ends_with = [&](const char* suffix) {
            const std::string s(suffix);
            return n.size() >= s.size() && n.compare(n.size() - s.size(), s.size(), s) == 0;
        };
        if (ends_with(".bias") || ends_with(".beta")) {
            m.setZero();
        } else if (ends_with(".gamma")) {
            m.setOnes();
        } else if (n == "mask_token" || n == "pos_table") {
            for (Eigen::Index i = 0; i < m.size(); ++i) {
                m.data()[i] = static_cast<T>(0.02 * rng.normal());
            }
        } else {
            const double limit = std::sqrt(6.0 / (double(m.rows()) + double(m.cols())));
            for (Eigen::Index i = 0; i < m.size(); ++i) {
                m.data()[i] = static_cast<T>(rng.uniform(-limit, limit));
            }
        }
    });
    return p;
}

// ---------------------------------------------------------------------------
// Pipeline stages
// ---------------------------------------------------------------------------

/// Standardizes an instance using statistics over the contributing cells only
/// (cells the model is allowed to see). The returned stats invert the scaling.
template <class T>
std::pair<Mat<T>, NormStats<T>> revin_normalize(const Mat<T>& values,
                                                const MaskMatrix& contributing,
                                                double eps) {
    const int rows = static_cast<int>(values.rows());
    const int cols = static_cast<int>(values.cols());
    if (contributing.rows() != rows || contributing.cols() != cols) {
        throw DomainError("revin: values/mask shape mismatch");
    }
    double sum = 0.0;
    std::int64_t n = 0;
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            if (contributing.at(r, c)) {
                sum += double(values(r, c));
                ++n;
            }
        }
    }
    if (n == 0) throw DomainError("revin: no cells contribute to statistics");
    const double mean = sum / double(n);
    double sq = 0.0;
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            if (contributing.at(r, c)) {
                const double delta = double(values(r, c)) - mean;
                sq += delta * delta;
            }
        }
    }
    NormStats<T> stats;
    stats.mean = static_cast<T>(mean);
    stats.stdev = static_cast<T>(std::max(std::sqrt(sq / double(n)), eps));
    Mat<T> out = (values.array() - stats.mean) / stats.stdev;
    return {std::move(out), stats};
}

template <class T>
Mat<T> revin_denormalize(const Mat<T>& normalized, const NormStats<T>& stats) {
    return (normalized.array() * stats.stdev + stats.mean).matrix();
}

/// Per-cell affine map of [value; covariates] to d_model dimensions.
/// `values_norm` is H x C, `covariates` is (H*C) x K, output is (H*C) x d.
template <class T>
Mat<T> project_input(const Mat<T>& values_norm, const Mat<T>& covariates,
                     const ParameterStore<T>& params, const ModelConfig& cfg) {
    const Eigen::Index cells = values_norm.size();
    if (values_norm.rows() != cfg.H || values_norm.cols() != cfg.C ||
        covariates.rows() != cells || covariates.cols() != cfg.covariate_channels) {
        throw DomainError("project_input: shape mismatch with model config");
    }
    Mat<T> latent(cells, cfg.d_model);
    // [value; covariates] * W = value * W_row0 + covariates * W_rest
    latent.noalias() = Eigen::Map<const Vec<T>>(values_norm.data(), cells) *
                       params.input_w.row(0);
    if (cfg.covariate_channels > 0) {
        latent.noalias() += covariates * params.input_w.bottomRows(cfg.covariate_channels);
    }
    latent.rowwise() += params.input_b.row(0);
    return latent;
}

/// Replaces the latent vector of every masked cell with the learned mask
/// token; unmasked cells pass through unchanged.
template <class T>
void apply_mask_token(Mat<T>& latent, const MaskMatrix& mask,
                      const ParameterStore<T>& params) {
    const int cols = mask.cols();
    for (int r = 0; r < mask.rows(); ++r) {
        for (int c = 0; c < cols; ++c) {
            if (mask.at(r, c)) {
                latent.row(static_cast<Eigen::Index>(r) * cols + c) = params.mask_token.row(0);
            }
        }
    }
}

/// Gathers the latent grid into per-patch rows: token t holds its P x P cells'
/// latent vectors flattened in row-major cell order, so row t has P*P*d_model
/// entries. Token order is row-major over the patch grid.
template <class T>
void patch_gather(const Mat<T>& latent, const ModelConfig& cfg, Mat<T>& patches) {
    const int P = cfg.patch_size, d = cfg.d_model;
    const int grid_w = cfg.C / P;
    patches.resize(cfg.tokens(), cfg.patch_dim());
    for (int token = 0; token < cfg.tokens(); ++token) {
        const int pr = token / grid_w, pc = token % grid_w;
        for (int u = 0; u < P; ++u) {
            const Eigen::Index cell0 =
                static_cast<Eigen::Index>(pr * P + u) * cfg.C + pc * P;
            for (int v = 0; v < P; ++v) {
                patches.row(token).segment((u * P + v) * d, d) = latent.row(cell0 + v);
            }
        }
    }
}

/// Inverse of patch_gather's index map.
template <class T>
void patch_scatter(const Mat<T>& patches, const ModelConfig& cfg, Mat<T>& latent) {
    const int P = cfg.patch_size, d = cfg.d_model;
    const int grid_w = cfg.C / P;
    latent.resize(static_cast<Eigen::Index>(cfg.H) * cfg.C, d);
    for (int token = 0; token < cfg.tokens(); ++token) {
        const int pr = token / grid_w, pc = token % grid_w;
        for (int u = 0; u < P; ++u) {
            const Eigen::Index cell0 =
                static_cast<Eigen::Index>(pr * P + u) * cfg.C + pc * P;
            for (int v = 0; v < P; ++v) {
                latent.row(cell0 + v) = patches.row(token).segment((u * P + v) * d, d);
            }
        }
    }
}

/// Affine projection of each flattened patch to one d_model token.
template <class T>
Mat<T> patch_embed(const Mat<T>& latent, const ParameterStore<T>& params,
                   const ModelConfig& cfg, Mat<T>* gathered = nullptr) {
    Mat<T> local;
    Mat<T>& patches = gathered ? *gathered : local;
    patch_gather(latent, cfg, patches);
    Mat<T> tokens(cfg.tokens(), cfg.d_model);
    tokens.noalias() = patches * params.patch_w;
    tokens.rowwise() += params.patch_b.row(0);
    return tokens;
}

/// Positional encoding table over the flattened token index. Sinusoidal mode
/// uses sin(pos / 10000^(2i/d)) and cos(pos / 10000^(2i/d)) on channel pairs.
template <class T>
Mat<T> positional_encoding(int num_tokens, int d_model, PeMode mode,
                           const ParameterStore<T>* params = nullptr) {
    Mat<T> table = Mat<T>::Zero(num_tokens, d_model);
    switch (mode) {
        case PeMode::none:
            break;
        case PeMode::learned:
            if (!params || params->pos_table.rows() != num_tokens) {
                throw DomainError("learned positional encoding needs a matching pos_table");
            }
            table = params->pos_table;
            break;
        case PeMode::sinusoidal: {
            if (d_model % 2 != 0) {
                throw ConfigError("sinusoidal positional encoding needs even d_model");
            }
            for (int pos = 0; pos < num_tokens; ++pos) {
                for (int i = 0; i < d_model / 2; ++i) {
                    const double rate =
                        std::pow(10000.0, -2.0 * double(i) / double(d_model));
                    table(pos, 2 * i) = static_cast<T>(std::sin(pos * rate));
                    table(pos, 2 * i + 1) = static_cast<T>(std::cos(pos * rate));
                }
            }
            break;
        }
    }
    return table;
}

/// Inverted-dropout mask sampler; scales kept units by 1/(1-rate) so
/// expectations match inference. Only the training path passes a context.
template <class T>
struct DropoutContext {
    double rate = 0.0;
    Rng* rng = nullptr;

    bool active() const { return rate > 0.0 && rng != nullptr; }
    void sample(Mat<T>& mask, Eigen::Index rows, Eigen::Index cols) {
        mask.resize(rows, cols);
        const T scale = static_cast<T>(1.0 / (1.0 - rate));
        for (Eigen::Index i = 0; i < mask.size(); ++i) {
            mask.data()[i] = rng->uniform() < rate ? T(0) : scale;
        }
    }
};

template <class T>
struct EncoderLayerCache {
    Mat<T> input;
    Mat<T> q, k, v;
    std::vector<Mat<T>> attn;        ///< per-head softmax matrices
    std::vector<Mat<T>> attn_drop;   ///< per-head dropout masks (training only)
    Mat<T> heads;                    ///< concatenated head outputs, pre out-proj
    Mat<T> sum1, hat1;
    Vec<T> inv_std1;
    Mat<T> z2;
    Mat<T> ff_pre, ff_act, ff_drop;
    Mat<T> sum2, hat2;
    Vec<T> inv_std2;
};

template <class T>
struct ForwardCache {
    NormStats<T> stats;
    MaskMatrix mask;
    Mat<T> values_norm;
    Mat<T> covariates;
    Mat<T> latent;      ///< post mask-token substitution
    Mat<T> patches;     ///< gathered patch rows
    Mat<T> tokens0;     ///< embedded tokens + positional encoding
    std::vector<EncoderLayerCache<T>> layers;
    Mat<T> enc_out;
    Mat<T> pe_table;    ///< memoized sinusoidal table
    bool pe_ready = false;
};

namespace detail {

template <class T>
T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(0.7071067811865475)));
}

template <class T>
T gelu_grad(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865475)));
    const T pdf = T(0.3989422804014327) * std::exp(T(-0.5) * x * x);
    return cdf + x * pdf;
}

/// Row-wise softmax in place.
template <class T>
void softmax_rows(Mat<T>& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        const T peak = row.maxCoeff();
        row = (row.array() - peak).exp();
        row /= row.sum();
    }
}

/// y = (x - mean) / sqrt(var + eps) * gamma + beta, per row.
template <class T>
Mat<T> layer_norm(const Mat<T>& x, const Mat<T>& gamma, const Mat<T>& beta, double eps,
                  Mat<T>& hat, Vec<T>& inv_std) {
    const Eigen::Index d = x.cols();
    hat.resize(x.rows(), d);
    inv_std.resize(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const T mean = x.row(r).mean();
        const T var = (x.row(r).array() - mean).square().sum() / T(d);
        inv_std(r) = T(1) / std::sqrt(var + T(eps));
        hat.row(r) = (x.row(r).array() - mean) * inv_std(r);
    }
    Mat<T> out = hat * gamma.row(0).asDiagonal();
    out.rowwise() += beta.row(0);
    return out;
}

}  // namespace detail

/// One post-norm transformer encoder block:
///   z1 = SelfAttention(z); z2 = LayerNorm(z1 + z);
///   z3 = FeedForward(z2);  out = LayerNorm(z3 + z2).
/// Attention is full bidirectional scaled dot-product over all tokens.
template <class T>
Mat<T> encoder_layer(const Mat<T>& tokens, const typename ParameterStore<T>::Layer& layer,
                     const ModelConfig& cfg, EncoderLayerCache<T>* cache = nullptr,
                     DropoutContext<T>* dropout = nullptr) {
    const int heads = cfg.num_heads, dh = cfg.head_dim();
    const T scale = static_cast<T>(1.0 / std::sqrt(double(dh)));

    EncoderLayerCache<T> local;
    EncoderLayerCache<T>& cc = cache ? *cache : local;
    cc.input = tokens;

    cc.q.noalias() = tokens * layer.wq;
    cc.q.rowwise() += layer.bq.row(0);
    cc.k.noalias() = tokens * layer.wk;
    cc.k.rowwise() += layer.bk.row(0);
    cc.v.noalias() = tokens * layer.wv;
    cc.v.rowwise() += layer.bv.row(0);

    cc.attn.resize(heads);
    cc.attn_drop.clear();
    if (dropout && dropout->active()) cc.attn_drop.resize(heads);
    cc.heads.resize(tokens.rows(), cfg.d_model);
    for (int h = 0; h < heads; ++h) {
        Mat<T>& a = cc.attn[h];
        a.noalias() = cc.q.middleCols(h * dh, dh) * cc.k.middleCols(h * dh, dh).transpose();
        a *= scale;
        detail::softmax_rows(a);
        if (dropout && dropout->active()) {
            dropout->sample(cc.attn_drop[h], a.rows(), a.cols());
            cc.heads.middleCols(h * dh, dh).noalias() =
                a.cwiseProduct(cc.attn_drop[h]) * cc.v.middleCols(h * dh, dh);
        } else {
            cc.heads.middleCols(h * dh, dh).noalias() = a * cc.v.middleCols(h * dh, dh);
        }
    }
    Mat<T> z1(tokens.rows(), cfg.d_model);
    z1.noalias() = cc.heads * layer.wo;
    z1.rowwise() += layer.bo.row(0);

    cc.sum1 = z1 + tokens;
    cc.z2 = detail::layer_norm(cc.sum1, layer.norm1_gamma, layer.norm1_beta, cfg.eps,
                               cc.hat1, cc.inv_std1);

    cc.ff_pre.noalias() = cc.z2 * layer.w1;
    cc.ff_pre.rowwise() += layer.b1.row(0);
    cc.ff_act = cc.ff_pre.unaryExpr([](T x) { return detail::gelu(x); });
    if (dropout && dropout->active()) {
        dropout->sample(cc.ff_drop, cc.ff_act.rows(), cc.ff_act.cols());
        cc.ff_act = cc.ff_act.cwiseProduct(cc.ff_drop);
    } else {
        cc.ff_drop.resize(0, 0);
    }
    Mat<T> z3(tokens.rows(), cfg.d_model);
    z3.noalias() = cc.ff_act * layer.w2;
    z3.rowwise() += layer.b2.row(0);

    cc.sum2 = z3 + cc.z2;
    Mat<T> out = detail::layer_norm(cc.sum2, layer.norm2_gamma, layer.norm2_beta, cfg.eps,
                                    cc.hat2, cc.inv_std2);
    if (!out.allFinite()) throw NumericError("encoder layer produced non-finite activations");
    return out;
}

/// Maps each encoded token back to its patch's P*P cell values and reassembles
/// the H x C grid (single output channel squeezed).
template <class T>
Mat<T> reconstruct(const Mat<T>& tokens, const ParameterStore<T>& params,
                   const ModelConfig& cfg) {
    if (tokens.rows() != cfg.tokens() || tokens.cols() != cfg.d_model) {
        throw DomainError("reconstruct: token shape mismatch");
    }
    Mat<T> flat(cfg.tokens(), cfg.patch_out());
    flat.noalias() = tokens * params.recon_w;
    flat.rowwise() += params.recon_b.row(0);

    const int P = cfg.patch_size;
    const int grid_w = cfg.C / P;
    Mat<T> out(cfg.H, cfg.C);
    for (int token = 0; token < cfg.tokens(); ++token) {
        const int pr = token / grid_w, pc = token % grid_w;
        for (int u = 0; u < P; ++u) {
            for (int v = 0; v < P; ++v) {
                out(pr * P + u, pc * P + v) = flat(token, u * P + v);
            }
        }
    }
    return out;
}

/// Full pipeline: revin -> input projection -> latent mask tokens -> patch
/// embedding + positional encoding -> encoder stack -> reconstruction ->
/// denormalization. Normalization statistics are computed over unmasked cells
/// only, so they are equally computable at training and inference time.
/// Deterministic given parameters and inputs.
template <class T>
Mat<T> forward(const Mat<T>& values, const Mat<T>& covariates, const MaskMatrix& mask,
               const ParameterStore<T>& params, const ModelConfig& cfg,
               ForwardCache<T>* cache = nullptr, DropoutContext<T>* dropout = nullptr) {
    if (mask.rows() != cfg.H || mask.cols() != cfg.C) {
        throw DomainError("forward: mask shape mismatch with model config");
    }
    ForwardCache<T> local;
    ForwardCache<T>& cc = cache ? *cache : local;

    auto [values_norm, stats] = revin_normalize<T>(values, mask.complement(), cfg.eps);
    cc.stats = stats;
    cc.mask = mask;
    cc.values_norm = std::move(values_norm);
    cc.covariates = covariates;

    cc.latent = project_input(cc.values_norm, cc.covariates, params, cfg);
    apply_mask_token(cc.latent, mask, params);

    cc.tokens0 = patch_embed(cc.latent, params, cfg, &cc.patches);
    if (cfg.pe_mode == PeMode::sinusoidal) {
        if (!cc.pe_ready || cc.pe_table.rows() != cfg.tokens()) {
            cc.pe_table = positional_encoding<T>(cfg.tokens(), cfg.d_model, cfg.pe_mode);
            cc.pe_ready = true;
        }
        cc.tokens0 += cc.pe_table;
    } else if (cfg.pe_mode == PeMode::learned) {
        cc.tokens0 += params.pos_table;
    }

    cc.layers.resize(cfg.num_layers);
    Mat<T> tokens = cc.tokens0;
    for (int l = 0; l < cfg.num_layers; ++l) {
        tokens = encoder_layer(tokens, params.layers[l], cfg, &cc.layers[l], dropout);
    }
    cc.enc_out = tokens;

    Mat<T> pred_norm = reconstruct(cc.enc_out, params, cfg);
    return revin_denormalize(pred_norm, cc.stats);
}

}  // namespace tripcast
