#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <istream>
#include <map>
#include <memory>
#include <ostream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tripcast/date.hpp"
#include "tripcast/errors.hpp"
#include "tripcast/linalg.hpp"
#include "tripcast/mask_matrix.hpp"
#include "tripcast/rng.hpp"

namespace tripcast {

/// Number of deterministic covariate channels attached to every cell:
/// day-of-week one-hot (7) + month one-hot (12) + normalized leading index (1)
/// + normalized event-row index (1).
inline constexpr int kCovariateChannels = 21;

/// One 2D trip time series: event time (rows, daily) x leading time (columns).
/// Column C-1 is the leading step closest to the event (0 days before); column
/// 0 is the farthest (C-1 days before). Immutable after construction.
struct TripFrame {
    std::string series_id;
    std::string group_id;
    Date start_date;     ///< event date of row 0; row h is start_date + h
    Matd values;         ///< H x C
    MaskMatrix observed; ///< H x C, true where the value is a real observation

    int height() const { return static_cast<int>(values.rows()); }
    int width() const { return static_cast<int>(values.cols()); }
    Date event_date(int row) const { return start_date + row; }
    Date end_date() const { return start_date + (height() - 1); }

    /// Enforces the type invariants: matching shapes, finite observed values,
    /// and per-row frontier consistency (observed cells form a prefix of each
    /// row, i.e. earlier leading steps are observed first).
    void validate() const {
        const int h = height(), c = width();
        if (h < 1 || c < 1) throw DataError("frame '" + series_id + "' is empty");
        if (observed.rows() != h || observed.cols() != c) {
            throw DataError("frame '" + series_id + "' observed/values shape mismatch");
        }
        for (int r = 0; r < h; ++r) {
            bool seen_gap = false;
            for (int col = 0; col < c; ++col) {
                if (!observed.at(r, col)) {
                    seen_gap = true;
                    continue;
                }
                if (seen_gap) {
                    throw DataError("frame '" + series_id + "' row " +
                                    event_date(r).to_string() +
                                    " is not frontier-consistent (hole before column " +
                                    std::to_string(col) + ")");
                }
                if (!std::isfinite(values(r, col))) {
                    throw DataError("frame '" + series_id + "' has non-finite value at " +
                                    event_date(r).to_string());
                }
            }
        }
    }
};

/// Boolean mask of the unobserved frontier triangle: with `now` offset d, the
/// last d event rows have 1..d trailing leading-steps masked.
inline MaskMatrix frontier_mask(int rows, int cols, int now_offset) {
    return staircase_mask(rows, cols, now_offset);
}

/// Fills the (H*C) x 21 covariate matrix for a window starting at
/// `window_start`, cells in row-major order.
template <class T>
void fill_covariates(Date window_start, int rows, int cols, Mat<T>& out) {
    out.setZero(static_cast<Eigen::Index>(rows) * cols, kCovariateChannels);
    for (int r = 0; r < rows; ++r) {
        const Date d = window_start + r;
        const int dow = d.weekday();
        const int month = static_cast<int>(d.month());
        const T row_pos = rows > 1 ? T(r) / T(rows - 1) : T(0);
        for (int c = 0; c < cols; ++c) {
            const Eigen::Index cell = static_cast<Eigen::Index>(r) * cols + c;
            out(cell, dow) = T(1);
            out(cell, 7 + month - 1) = T(1);
            out(cell, 19) = cols > 1 ? T(c) / T(cols - 1) : T(0);
            out(cell, 20) = row_pos;
        }
    }
}

/// A fixed-size, fully observed training window into a TripFrame. Holds a
/// reference to the source frame; values and covariates are materialized on
/// demand.
struct Instance {
    std::shared_ptr<const TripFrame> frame;
    int row0 = 0;
    int height = 0;
    int width = 0;
    int col0 = 0;

    const std::string& series_id() const { return frame->series_id; }
    Date window_start() const { return frame->start_date + row0; }

    Matd values() const {
        return frame->values.block(row0, col0, height, width);
    }
    /// Reconstruction target; identical to the raw values for self-supervised
    /// masked training.
    Matd target() const { return values(); }

    Matd covariates() const {
        Matd cov;
        fill_covariates(window_start(), height, width, cov);
        return cov;
    }
};

/// Series-level pretrain / train-test partition plus the evaluation date split.
struct DatasetSplit {
    std::vector<TripFrame> pretrain;
    std::vector<TripFrame> traintest;
    DateRange validation_range;
    DateRange test_range;
};

inline DateRange default_validation_range() {
    return {Date::from_ymd(2019, 6, 1), Date::from_ymd(2019, 8, 31)};
}
inline DateRange default_test_range() {
    return {Date::from_ymd(2019, 9, 1), Date::from_ymd(2019, 12, 31)};
}

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
        std::size_t comma = line.find(',', start);
        if (comma == std::string_view::npos) {
            fields.push_back(line.substr(start));
            break;
        }
        fields.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
    return fields;
}

struct SeriesAccum {
    std::string group_id;
    std::vector<std::tuple<Date, int, double>> records;  // (event_date, lead, value)
    std::unordered_set<std::uint64_t> seen;
    Date min_date, max_date;
    int max_lead = 0;
};

}  // namespace detail

/// Reads the long-format comma-separated stream
/// `series_id,group_id,event_date,lead,value` into one TripFrame per series.
/// Each frame spans the contiguous daily range covering all of its records;
/// cells with no record are marked unobserved. The leading axis width of a
/// frame is its largest lead + 1. Extra trailing columns are ignored.
inline std::vector<TripFrame> ingest_long_csv(std::istream& in) {
    std::string line;
    long line_no = 0;

    if (!std::getline(in, line)) return {};
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    {
        auto header = detail::split_fields(line);
        static constexpr std::string_view expected[5] = {"series_id", "group_id",
                                                         "event_date", "lead", "value"};
        if (header.size() < 5 ||
            !std::equal(std::begin(expected), std::end(expected), header.begin())) {
            throw DataError("line 1: expected header series_id,group_id,event_date,lead,value");
        }
    }

    std::map<std::string, detail::SeriesAccum, std::less<>> series;
    std::vector<std::string> order;

    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto fields = detail::split_fields(line);
        const std::string where = "line " + std::to_string(line_no);
        if (fields.size() < 5) throw DataError(where + ": expected 5 fields");

        auto date = Date::try_parse(fields[2]);
        if (!date) throw DataError(where + ": malformed date '" + std::string(fields[2]) + "'");

        int lead = 0;
        {
            auto s = fields[3];
            auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), lead);
            if (ec != std::errc() || p != s.data() + s.size()) {
                throw DataError(where + ": malformed lead '" + std::string(s) + "'");
            }
        }
        if (lead < 0) throw DomainError(where + ": negative lead " + std::to_string(lead));
        if (lead > 100000) throw DataError(where + ": lead " + std::to_string(lead) + " too large");

        double value = 0.0;
        {
            auto s = fields[4];
            auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
            if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(value)) {
                throw DataError(where + ": non-numeric value '" + std::string(s) + "'");
            }
        }

        auto it = series.find(fields[0]);
        if (it == series.end()) {
            it = series.emplace(std::string(fields[0]), detail::SeriesAccum{}).first;
            it->second.group_id = std::string(fields[1]);
            it->second.min_date = it->second.max_date = *date;
            order.push_back(it->first);
        } else if (it->second.group_id != fields[1]) {
            throw DataError(where + ": series '" + it->first + "' has conflicting group_id");
        }

        auto& acc = it->second;
        const std::uint64_t key =
            (static_cast<std::uint64_t>(static_cast<std::uint32_t>(date->raw())) << 20) |
            static_cast<std::uint64_t>(lead);
        if (!acc.seen.insert(key).second) {
            throw DataError(where + ": duplicate record for series '" + it->first +
                            "' at " + date->to_string() + " lead " + std::to_string(lead));
        }
        acc.min_date = std::min(acc.min_date, *date);
        acc.max_date = std::max(acc.max_date, *date);
        acc.max_lead = std::max(acc.max_lead, lead);
        acc.records.emplace_back(*date, lead, value);
    }

    std::vector<TripFrame> frames;
    frames.reserve(order.size());
    for (const auto& id : order) {
        auto& acc = series.find(id)->second;
        const int height = acc.max_date - acc.min_date + 1;
        const int width = acc.max_lead + 1;
        TripFrame frame;
        frame.series_id = id;
        frame.group_id = acc.group_id;
        frame.start_date = acc.min_date;
        frame.values = Matd::Zero(height, width);
        frame.observed = MaskMatrix(height, width, false);
        for (const auto& [date, lead, value] : acc.records) {
            const int r = date - acc.min_date;
            const int c = width - 1 - lead;
            frame.values(r, c) = value;
            frame.observed.set(r, c, true);
        }
        frame.validate();
        frames.push_back(std::move(frame));
    }
    return frames;
}

/// Inverse of ingest_long_csv for observed cells: emits one record per
/// observed cell in the long format. Values are written with shortest
/// round-trip precision, so ingest(emit(frames)) reproduces them exactly.
inline void emit_long_csv(const std::vector<TripFrame>& frames, std::ostream& out) {
    out << "series_id,group_id,event_date,lead,value\n";
    char buf[32];
    for (const auto& frame : frames) {
        const int width = frame.width();
        for (int r = 0; r < frame.height(); ++r) {
            const std::string date = frame.event_date(r).to_string();
            for (int c = 0; c < width; ++c) {
                if (!frame.observed.at(r, c)) continue;
                auto res = std::to_chars(buf, buf + sizeof(buf), frame.values(r, c));
                out << frame.series_id << ',' << frame.group_id << ',' << date << ','
                    << (width - 1 - c) << ',' << std::string_view(buf, res.ptr - buf)
                    << '\n';
            }
        }
    }
    if (!out) throw IoError("failed writing long-format stream");
}

/// Sliding windows along the event axis at the given stride; the leading axis
/// is truncated to the last `width` columns. Windows containing any
/// unobserved cell are dropped so training targets stay trustworthy. A frame
/// smaller than the window yields an empty list.
inline std::vector<Instance> window_slice(std::shared_ptr<const TripFrame> frame,
                                          int height, int width, int stride) {
    if (height < 1 || width < 1) throw DomainError("window dimensions must be positive");
    if (stride < 1) throw DomainError("stride must be >= 1");
    std::vector<Instance> out;
    if (frame->height() < height || frame->width() < width) return out;
    const int col0 = frame->width() - width;
    for (int row0 = 0; row0 + height <= frame->height(); row0 += stride) {
        bool complete = true;
        for (int r = row0; complete && r < row0 + height; ++r) {
            for (int c = col0; c < col0 + width; ++c) {
                if (!frame->observed.at(r, c)) {
                    complete = false;
                    break;
                }
            }
        }
        if (complete) out.push_back(Instance{frame, row0, height, width, col0});
    }
    return out;
}

inline std::vector<Instance> window_slice(const TripFrame& frame, int height,
                                          int width, int stride) {
    return window_slice(std::make_shared<TripFrame>(frame), height, width, stride);
}

namespace detail {

// Reachable subset sums as a bitset over series counts 0..total.
class SumSet {
public:
    explicit SumSet(int total) : total_(total), words_(total / 64 + 1, 0) {}
    void set(int v) { words_[v >> 6] |= 1ULL << (v & 63); }
    bool test(int v) const {
        return v >= 0 && v <= total_ && (words_[v >> 6] >> (v & 63)) & 1;
    }
    /// this |= (this << k)
    void fold_in(int k) {
        const int word_shift = k >> 6, bit_shift = k & 63;
        for (int i = static_cast<int>(words_.size()) - 1; i >= 0; --i) {
            std::uint64_t v = 0;
            if (i - word_shift >= 0) {
                v = words_[i - word_shift] << bit_shift;
                if (bit_shift && i - word_shift - 1 >= 0) {
                    v |= words_[i - word_shift - 1] >> (64 - bit_shift);
                }
            }
            words_[i] |= v;
        }
    }
    std::size_t word_count() const { return words_.size(); }

private:
    int total_;
    std::vector<std::uint64_t> words_;
};

}  // namespace detail

/// Partitions frames into pretrain / train-test sets at group granularity.
/// Groups are shuffled by seed, then a subset whose series share is as close
/// as possible to `pretrain_fraction` is selected (no group is ever split,
/// and both sides stay non-empty). Same inputs and seed give the same split.
inline DatasetSplit split_dataset(const std::vector<TripFrame>& frames,
                                  double pretrain_fraction, std::uint64_t seed,
                                  DateRange validation_range = default_validation_range(),
                                  DateRange test_range = default_test_range()) {
    if (!(pretrain_fraction > 0.0 && pretrain_fraction < 1.0)) {
        throw DomainError("pretrain_fraction must be in (0, 1)");
    }
    if (validation_range.end >= test_range.start) {
        throw DomainError("test_range must start after validation_range ends");
    }

    std::vector<std::string> group_order;
    std::map<std::string, int, std::less<>> group_sizes;
    for (const auto& frame : frames) {
        auto [it, inserted] = group_sizes.try_emplace(frame.group_id, 0);
        if (inserted) group_order.push_back(frame.group_id);
        ++it->second;
    }
    const int n_groups = static_cast<int>(group_order.size());
    if (n_groups < 2) throw SplitError("need at least 2 groups to split");

    Rng rng(derive_seed(seed, 0x5EEDULL));
    for (int i = n_groups - 1; i > 0; --i) {
        const int j = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(i) + 1));
        std::swap(group_order[i], group_order[j]);
    }

    const int total = static_cast<int>(frames.size());
    std::vector<int> sizes(n_groups);
    for (int i = 0; i < n_groups; ++i) sizes[i] = group_sizes.find(group_order[i])->second;

    std::unordered_set<std::string> pretrain_groups;

    // Suffix reachability over subset sums lets us pick, in shuffled order, a
    // subset hitting the series count closest to the target fraction.
    const std::size_t words = static_cast<std::size_t>(total / 64 + 1);
    if ((static_cast<std::size_t>(n_groups) + 1) * words <= (1u << 24)) {
        std::vector<detail::SumSet> suffix(n_groups + 1, detail::SumSet(total));
        suffix[n_groups].set(0);
        for (int i = n_groups - 1; i >= 0; --i) {
            suffix[i] = suffix[i + 1];
            suffix[i].fold_in(sizes[i]);
        }
        const double target = pretrain_fraction * total;
        int best = -1;
        for (int count = 1; count < total; ++count) {
            if (!suffix[0].test(count)) continue;
            if (best < 0 || std::abs(count - target) < std::abs(best - target)) best = count;
        }
        if (best < 0) throw SplitError("no feasible non-trivial split");
        int remaining = best;
        for (int i = 0; i < n_groups; ++i) {
            if (sizes[i] <= remaining && suffix[i + 1].test(remaining - sizes[i])) {
                pretrain_groups.insert(group_order[i]);
                remaining -= sizes[i];
            }
        }
    } else {
        // Too many groups x series for the exact subset-sum table; fall back
        // to a largest-first greedy fill toward the target count.
        std::stable_sort(group_order.begin(), group_order.end(),
                         [&](const auto& a, const auto& b) {
                             return group_sizes.find(a)->second > group_sizes.find(b)->second;
                         });
        const double target = pretrain_fraction * total;
        int count = 0;
        for (int i = 0; i < n_groups; ++i) {
            const int size = group_sizes.find(group_order[i])->second;
            if (static_cast<int>(pretrain_groups.size()) == n_groups - 1) break;
            if (std::abs(count + size - target) <= std::abs(count - target)) {
                pretrain_groups.insert(group_order[i]);
                count += size;
            }
        }
        if (pretrain_groups.empty()) pretrain_groups.insert(group_order[0]);
    }

    DatasetSplit split;
    split.validation_range = validation_range;
    split.test_range = test_range;
    for (const auto& frame : frames) {
        if (pretrain_groups.count(frame.group_id)) {
            split.pretrain.push_back(frame);
        } else {
            split.traintest.push_back(frame);
        }
    }
    return split;
}

}  // namespace tripcast
