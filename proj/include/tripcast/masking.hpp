#pragma once

#include <algorithm>
#include <cstdint>
#include <string>

#include "tripcast/errors.hpp"
#include "tripcast/mask_matrix.hpp"
#include "tripcast/rng.hpp"
#include "tripcast/trip_frame.hpp"

namespace tripcast {

/// Pre-training mask sampling policy.
struct MaskPolicy {
    double random_p = 0.15;          ///< Bernoulli rate for random token masking
    bool progressive_enabled = true; ///< draw a staircase triangle each instance
    int h_pred_max = 15;             ///< maximum triangle depth
    std::uint64_t seed = 0;

    void validate(int rows, int cols) const {
        if (!(random_p >= 0.0 && random_p <= 1.0)) {
            throw DomainError("random_p must be in [0, 1]");
        }
        if (h_pred_max < 1 || h_pred_max > std::min(rows - 1, cols)) {
            throw DomainError("h_pred_max " + std::to_string(h_pred_max) +
                              " out of range for " + std::to_string(rows) + "x" +
                              std::to_string(cols));
        }
    }
};

/// Independent Bernoulli(p) mask per cell.
inline MaskMatrix random_mask(int rows, int cols, double p, Rng& rng) {
    if (!(p >= 0.0 && p <= 1.0)) throw DomainError("mask probability must be in [0, 1]");
    MaskMatrix mask(rows, cols);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            if (rng.uniform() < p) mask.set(r, c, true);
        }
    }
    return mask;
}

/// Staircase triangle of d(d+1)/2 cells anchored at the bottom-right corner,
/// imitating the inference-time frontier. Equals frontier_mask(rows, cols, d)
/// bit for bit.
inline MaskMatrix progressive_mask(int rows, int cols, int depth) {
    if (depth < 1) throw DomainError("progressive mask depth must be >= 1");
    return staircase_mask(rows, cols, depth);
}

/// Draws one training mask: if progressive masking is enabled, a triangle of
/// depth d ~ Uniform{1..h_pred_max} unioned with Bernoulli(random_p) masking
/// over the remaining (non-triangle) cells; otherwise random masking alone.
inline MaskMatrix sample_training_mask(const MaskPolicy& policy, int rows, int cols,
                                       Rng& rng) {
    policy.validate(rows, cols);
    if (!policy.progressive_enabled) {
        return random_mask(rows, cols, policy.random_p, rng);
    }
    const int depth = 1 + static_cast<int>(rng.uniform_int(
                              static_cast<std::uint64_t>(policy.h_pred_max)));
    MaskMatrix mask = progressive_mask(rows, cols, depth);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            const bool draw = rng.uniform() < policy.random_p;
            if (draw && !mask.at(r, c)) mask.set(r, c, true);
        }
    }
    return mask;
}

/// Depth of the unobserved frontier of an observedness matrix. Throws if the
/// unobserved region is not exactly a staircase triangle.
inline int frontier_offset(const MaskMatrix& observed) {
    const int rows = observed.rows(), cols = observed.cols();
    int depth = 0;
    for (int c = cols - 1; c >= 0 && !observed.at(rows - 1, c); --c) ++depth;
    if (depth > std::min(rows - 1, cols) ||
        observed.complement() != staircase_mask(rows, cols, depth)) {
        throw DomainError("unobserved region is not a frontier triangle");
    }
    return depth;
}

/// Inference-time mask: exactly the frontier triangle, no random component.
inline MaskMatrix inference_mask(int rows, int cols, int depth, int h_pred_max) {
    if (depth < 0 || depth > h_pred_max) {
        throw DomainError("frontier offset " + std::to_string(depth) +
                          " exceeds h_pred_max " + std::to_string(h_pred_max));
    }
    return staircase_mask(rows, cols, depth);
}

/// Inference-time mask derived from an instance's actual observedness.
inline MaskMatrix inference_mask(const MaskMatrix& observed, int h_pred_max) {
    const int depth = frontier_offset(observed);
    return inference_mask(observed.rows(), observed.cols(), depth, h_pred_max);
}

}  // namespace tripcast
