#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "tripcast/errors.hpp"

namespace tripcast {

/// Dense boolean H x C matrix. In masking contexts true means "token is
/// masked / treated as unobserved"; in observedness contexts true means
/// "cell holds a real observation".
class MaskMatrix {
public:
    MaskMatrix() = default;
    MaskMatrix(int rows, int cols, bool value = false)
        : rows_(rows), cols_(cols),
          bits_(static_cast<std::size_t>(rows) * cols, value ? 1 : 0) {
        if (rows < 1 || cols < 1) {
            throw DomainError("MaskMatrix requires positive dimensions");
        }
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }

    bool at(int r, int c) const { return bits_[idx(r, c)] != 0; }
    void set(int r, int c, bool v) { bits_[idx(r, c)] = v ? 1 : 0; }

    std::size_t count() const {
        return static_cast<std::size_t>(
            std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
    }

    bool any() const {
        return std::any_of(bits_.begin(), bits_.end(), [](auto b) { return b != 0; });
    }

    /// Cell-wise complement.
    MaskMatrix complement() const {
        MaskMatrix out(rows_, cols_);
        for (std::size_t i = 0; i < bits_.size(); ++i) out.bits_[i] = bits_[i] ^ 1;
        return out;
    }

    /// Cell-wise OR.
    MaskMatrix union_with(const MaskMatrix& other) const {
        require_same_shape(other);
        MaskMatrix out(rows_, cols_);
        for (std::size_t i = 0; i < bits_.size(); ++i) {
            out.bits_[i] = bits_[i] | other.bits_[i];
        }
        return out;
    }

    /// True if every set cell of this mask is also set in `other`.
    bool subset_of(const MaskMatrix& other) const {
        require_same_shape(other);
        for (std::size_t i = 0; i < bits_.size(); ++i) {
            if (bits_[i] && !other.bits_[i]) return false;
        }
        return true;
    }

    bool operator==(const MaskMatrix&) const = default;

private:
    std::size_t idx(int r, int c) const {
        return static_cast<std::size_t>(r) * cols_ + c;
    }
    void require_same_shape(const MaskMatrix& other) const {
        if (rows_ != other.rows_ || cols_ != other.cols_) {
            throw DomainError("mask shape mismatch");
        }
    }

    int rows_ = 0;
    int cols_ = 0;
    std::vector<std::uint8_t> bits_;
};

/// Lower-right staircase triangle: with offset d the last d rows have
/// 1, 2, ..., d trailing columns set. Shared definition behind both the
/// data-side frontier mask and the training-side progressive mask, so the
/// two are equal by construction.
inline MaskMatrix staircase_mask(int rows, int cols, int depth) {
    if (depth < 0 || depth > std::min(rows - 1, cols)) {
        throw DomainError("staircase depth " + std::to_string(depth) +
                          " out of range for " + std::to_string(rows) + "x" +
                          std::to_string(cols));
    }
    MaskMatrix mask(rows, cols);
    for (int r = rows - depth; r < rows; ++r) {
        int overhang = r - (rows - 1 - depth);  // 1..depth
        for (int c = cols - overhang; c < cols; ++c) mask.set(r, c, true);
    }
    return mask;
}

}  // namespace tripcast
