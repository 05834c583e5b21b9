#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include "tripcast/errors.hpp"
#include "tripcast/gradients.hpp"
#include "tripcast/masking.hpp"
#include "tripcast/model.hpp"
#include "tripcast/parallel.hpp"
#include "tripcast/trip_frame.hpp"

namespace tripcast {

enum class LossScope { masked_only, all_cells };

inline std::string to_string(LossScope scope) {
    return scope == LossScope::masked_only ? "masked_only" : "all_cells";
}

inline LossScope loss_scope_from_string(const std::string& s) {
    if (s == "masked_only") return LossScope::masked_only;
    if (s == "all_cells") return LossScope::all_cells;
    throw ConfigError("unknown loss_scope '" + s + "'");
}

/// Pre-training recipe: batch assembly, masked-MAE objective, adaptive-moment
/// optimizer, cosine learning-rate decay.
struct TrainConfig {
    int batch_size = 256;
    std::int64_t total_iters = 50000;
    double base_lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    MaskPolicy mask_policy;
    LossScope loss_scope = LossScope::masked_only;
    std::uint64_t seed = 0;
    std::int64_t checkpoint_every = 1000;
    std::int64_t log_every = 100;
    double clip_norm = 0.0;  ///< 0 disables gradient clipping

    void validate() const {
        if (batch_size < 1) throw ConfigError("batch_size must be positive");
        if (total_iters < 0) throw ConfigError("total_iters must be non-negative");
        if (!(base_lr > 0.0)) throw ConfigError("base_lr must be positive");
        if (checkpoint_every < 1 || log_every < 1) {
            throw ConfigError("checkpoint_every and log_every must be positive");
        }
        if (clip_norm < 0.0) throw ConfigError("clip_norm must be non-negative");
    }

    /// CPU-friendly configuration for desk-scale runs.
    static TrainConfig desk_preset() {
        TrainConfig cfg;
        cfg.batch_size = 32;
        cfg.total_iters = 2000;
        return cfg;
    }
};

/// Mutable optimizer state carried across iterations; moment arrays are
/// shaped exactly like the parameters.
template <class T>
struct TrainState {
    std::int64_t iteration = 0;
    std::uint64_t seed = 0;
    ParameterStore<T> m;
    ParameterStore<T> v;
};

struct LossLogRow {
    std::int64_t iteration;  ///< steps completed when the row was emitted
    double loss;             ///< mean loss over the reporting interval
    double lr;               ///< learning rate of the last step in the interval
};

/// Mean absolute error over the selected cells of the grid.
template <class T>
T masked_mae_loss(const Mat<T>& pred, const Mat<T>& target, const MaskMatrix& selected) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols() ||
        selected.rows() != pred.rows() || selected.cols() != pred.cols()) {
        throw DomainError("masked_mae_loss: shape mismatch");
    }
    T sum = T(0);
    std::int64_t n = 0;
    for (int r = 0; r < selected.rows(); ++r) {
        for (int c = 0; c < selected.cols(); ++c) {
            if (selected.at(r, c)) {
                sum += std::abs(pred(r, c) - target(r, c));
                ++n;
            }
        }
    }
    if (n == 0) throw DomainError("masked_mae_loss: no cells selected");
    return sum / T(n);
}

/// Loss plus its gradient w.r.t. the prediction, scaled by `weight`.
template <class T>
T masked_mae_loss_grad(const Mat<T>& pred, const Mat<T>& target,
                       const MaskMatrix& selected, T weight, Mat<T>& dpred) {
    const T loss = masked_mae_loss(pred, target, selected);
    std::int64_t n = 0;
    for (int r = 0; r < selected.rows(); ++r) {
        for (int c = 0; c < selected.cols(); ++c) {
            if (selected.at(r, c)) ++n;
        }
    }
    dpred.setZero(pred.rows(), pred.cols());
    const T unit = weight / T(n);
    for (int r = 0; r < selected.rows(); ++r) {
        for (int c = 0; c < selected.cols(); ++c) {
            if (!selected.at(r, c)) continue;
            const T diff = pred(r, c) - target(r, c);
            dpred(r, c) = diff > T(0) ? unit : (diff < T(0) ? -unit : T(0));
        }
    }
    return loss;
}

/// Cosine decay from base_lr to zero over the run.
inline double lr_at(std::int64_t step, const TrainConfig& cfg) {
    if (step < 0 || step > cfg.total_iters) {
        throw DomainError("lr_at: step " + std::to_string(step) + " outside [0, " +
                          std::to_string(cfg.total_iters) + "]");
    }
    if (cfg.total_iters == 0) return cfg.base_lr;
    return cfg.base_lr * 0.5 *
           (1.0 + std::cos(std::numbers::pi * double(step) / double(cfg.total_iters)));
}

namespace detail {

template <class T>
std::vector<Mat<T>*> tensor_ptrs(ParameterStore<T>& store) {
    std::vector<Mat<T>*> out;
    store.visit([&](const char*, Mat<T>& m) { out.push_back(&m); });
    return out;
}

template <class T>
std::vector<const Mat<T>*> tensor_ptrs(const ParameterStore<T>& store) {
    std::vector<const Mat<T>*> out;
    store.visit([&](const char*, const Mat<T>& m) { out.push_back(&m); });
    return out;
}

/// Bias-corrected adaptive-moment update, applied in place.
template <class T>
void adam_update(ParameterStore<T>& params, const ParameterStore<T>& grads,
                 TrainState<T>& state, double lr, const TrainConfig& cfg) {
    auto ps = tensor_ptrs(params);
    auto ms = tensor_ptrs(state.m);
    auto vs = tensor_ptrs(state.v);
    auto gs = tensor_ptrs(grads);
    const double t = double(state.iteration + 1);
    const T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
    const T c1 = T(1.0 / (1.0 - std::pow(cfg.beta1, t)));
    const T c2 = T(1.0 / (1.0 - std::pow(cfg.beta2, t)));
    for (std::size_t i = 0; i < ps.size(); ++i) {
        auto& p = *ps[i];
        auto& m = *ms[i];
        auto& v = *vs[i];
        const auto& g = *gs[i];
        m = b1 * m + (T(1) - b1) * g;
        v.array() = b2 * v.array() + (T(1) - b2) * g.array().square();
        p.array() -= T(lr) * (m.array() * c1) /
                     ((v.array() * c2).sqrt() + T(cfg.adam_eps));
    }
}

/// Fills the value grid and covariates for one instance in the compute type.
template <class T>
void materialize(const Instance& inst, Mat<T>& values, Mat<T>& covariates) {
    values = inst.frame->values
                 .block(inst.row0, inst.col0, inst.height, inst.width)
                 .template cast<T>();
    fill_covariates<T>(inst.window_start(), inst.height, inst.width, covariates);
}

}  // namespace detail

/// Scratch buffers reused across iterations, one per worker thread.
template <class T>
struct TrainWorkspace {
    ForwardCache<T> cache;
    ParameterStore<T> grads;
    Mat<T> values, covariates, dpred;
    bool initialized = false;
};

/// One optimizer step over a batch: per instance a training mask is sampled,
/// the forward pass runs, masked-MAE loss and gradients are averaged over the
/// batch, and the adaptive-moment update is applied at lr_at(iteration).
/// Deterministic given seeds; per-instance randomness is derived from
/// (seed, iteration, slot) counters, never from shared mutable state.
template <class T>
double train_step(ParameterStore<T>& params, TrainState<T>& state,
                  const std::vector<Instance>& batch, const TrainConfig& cfg,
                  const ModelConfig& mcfg, std::vector<TrainWorkspace<T>>& workspaces) {
    if (batch.empty()) throw DomainError("train_step: empty batch");
    cfg.mask_policy.validate(mcfg.H, mcfg.C);
    const int n = static_cast<int>(batch.size());
    const int threads = std::min<int>(static_cast<int>(workspaces.size()), n);
    const std::int64_t iter = state.iteration;

    for (auto& ws : workspaces) {
        if (!ws.initialized) {
            ws.grads = make_parameter_store<T>(mcfg);
            ws.initialized = true;
        } else {
            ws.grads.set_zero();
        }
    }

    std::vector<double> losses(n, 0.0);
    parallel_chunks(n, threads, [&](int begin, int end, int tid) {
        TrainWorkspace<T>& ws = workspaces[tid];
        for (int slot = begin; slot < end; ++slot) {
            const Instance& inst = batch[slot];
            if (inst.height != mcfg.H || inst.width != mcfg.C) {
                throw DomainError("train_step: instance window does not match model");
            }
            detail::materialize(inst, ws.values, ws.covariates);

            Rng mask_rng(derive_seed(cfg.mask_policy.seed, 0xA5CULL,
                                     static_cast<std::uint64_t>(iter),
                                     static_cast<std::uint64_t>(slot)));
            MaskMatrix mask = sample_training_mask(cfg.mask_policy, mcfg.H, mcfg.C,
                                                   mask_rng);
            MaskMatrix all_cells;
            if (cfg.loss_scope == LossScope::all_cells) {
                all_cells = MaskMatrix(mcfg.H, mcfg.C, true);
            }
            const MaskMatrix& selected =
                cfg.loss_scope == LossScope::masked_only ? mask : all_cells;

            Rng drop_rng(derive_seed(cfg.seed, 0xD120ULL,
                                     static_cast<std::uint64_t>(iter),
                                     static_cast<std::uint64_t>(slot)));
            DropoutContext<T> drop{mcfg.dropout, &drop_rng};
            DropoutContext<T>* drop_ptr = mcfg.dropout > 0.0 ? &drop : nullptr;

            Mat<T> pred = forward(ws.values, ws.covariates, mask, params, mcfg,
                                  &ws.cache, drop_ptr);
            const T loss = masked_mae_loss_grad<T>(pred, ws.values, selected,
                                                   T(1) / T(n), ws.dpred);
            losses[slot] = double(loss);
            backward(ws.dpred, ws.cache, params, mcfg, ws.grads);
        }
    });

    // Reduce per-thread gradients in fixed thread order.
    ParameterStore<T>& grads = workspaces[0].grads;
    for (int tid = 1; tid < threads; ++tid) {
        grads.visit_pairwise(workspaces[tid].grads,
                             [](Mat<T>& dst, const Mat<T>& src) { dst += src; });
    }

    double loss_sum = 0.0;
    for (int slot = 0; slot < n; ++slot) loss_sum += losses[slot];
    const double loss = loss_sum / n;
    if (!std::isfinite(loss) || !grads.all_finite()) {
        throw NumericError("non-finite loss or gradient at iteration " +
                           std::to_string(iter));
    }

    if (cfg.clip_norm > 0.0) {
        double sq = 0.0;
        grads.visit([&](const char*, const Mat<T>& g) { sq += double(g.squaredNorm()); });
        const double norm = std::sqrt(sq);
        if (norm > cfg.clip_norm) {
            const T scale = T(cfg.clip_norm / norm);
            grads.visit([&](const char*, Mat<T>& g) { g *= scale; });
        }
    }

    detail::adam_update(params, grads, state, lr_at(iter, cfg), cfg);
    ++state.iteration;
    return loss;
}

template <class T>
struct PretrainResult {
    ParameterStore<T> params;
    TrainState<T> state;
    std::vector<LossLogRow> log;
};

using CheckpointHook = std::function<void(std::int64_t iteration, bool final)>;

/// Runs the full pre-training loop: batches are sampled uniformly with
/// replacement from the instance pool, loss rows are emitted every
/// `log_every` iterations (interval means), and `on_checkpoint` fires every
/// `checkpoint_every` iterations and at the end. Resuming from a saved
/// (params, state) pair reproduces the uninterrupted run exactly.
template <class T>
PretrainResult<T> pretrain(const std::vector<Instance>& dataset, const TrainConfig& cfg,
                           const ModelConfig& mcfg,
                           ParameterStore<T> params, TrainState<T> state,
                           const CheckpointHook& on_checkpoint = {},
                           std::ostream* progress = nullptr) {
    cfg.validate();
    mcfg.validate();
    if (dataset.empty()) throw DomainError("pretrain: empty dataset");

    const int threads = std::min(effective_threads(), cfg.batch_size);
    std::vector<TrainWorkspace<T>> workspaces(threads);

    PretrainResult<T> result{std::move(params), std::move(state), {}};
    std::vector<Instance> batch(cfg.batch_size);

    double interval_sum = 0.0;
    std::int64_t interval_count = 0;
    for (std::int64_t iter = result.state.iteration; iter < cfg.total_iters; ++iter) {
        Rng batch_rng(derive_seed(cfg.seed, 0xBA7C4ULL, static_cast<std::uint64_t>(iter)));
        for (int slot = 0; slot < cfg.batch_size; ++slot) {
            batch[slot] = dataset[batch_rng.uniform_int(dataset.size())];
        }
        const double lr = lr_at(iter, cfg);
        const double loss = train_step(result.params, result.state, batch, cfg, mcfg,
                                       workspaces);
        interval_sum += loss;
        ++interval_count;

        const std::int64_t done = iter + 1;
        if (done % cfg.log_every == 0 || done == cfg.total_iters) {
            result.log.push_back({done, interval_sum / double(interval_count), lr});
            if (progress) {
                *progress << "iter " << done << "  loss " << interval_sum / interval_count
                          << "  lr " << lr << '\n';
            }
            interval_sum = 0.0;
            interval_count = 0;
        }
        if (on_checkpoint && done % cfg.checkpoint_every == 0 && done != cfg.total_iters) {
            on_checkpoint(done, false);
        }
    }
    if (on_checkpoint) on_checkpoint(result.state.iteration, true);
    return result;
}

/// Convenience overload starting from seeded fresh parameters and state.
template <class T>
PretrainResult<T> pretrain(const std::vector<Instance>& dataset, const TrainConfig& cfg,
                           const ModelConfig& mcfg,
                           const CheckpointHook& on_checkpoint = {},
                           std::ostream* progress = nullptr) {
    ParameterStore<T> params = init_parameters<T>(mcfg, cfg.seed);
    TrainState<T> state;
    state.seed = cfg.seed;
    state.m = params.like();
    state.v = params.like();
    return pretrain<T>(dataset, cfg, mcfg, std::move(params), std::move(state),
                       on_checkpoint, progress);
}

/// Serializes loss rows as the text table `iteration,loss,lr`.
inline void write_loss_log(const std::vector<LossLogRow>& log, std::ostream& out) {
    out << "iteration,loss,lr\n";
    char buf[64];
    for (const auto& row : log) {
        out << row.iteration << ',';
        auto r1 = std::to_chars(buf, buf + sizeof(buf), row.loss);
        out << std::string_view(buf, r1.ptr - buf) << ',';
        auto r2 = std::to_chars(buf, buf + sizeof(buf), row.lr);
        out << std::string_view(buf, r2.ptr - buf) << '\n';
    }
}

}  // namespace tripcast
