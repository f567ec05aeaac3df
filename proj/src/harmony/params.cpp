#include "harmony/params.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "harmony/error.hpp"
#include "harmony/rng.hpp"

namespace harmony {

const char* to_string(SegmentKind kind) {
    switch (kind) {
        case SegmentKind::Matrix: return "matrix";
        case SegmentKind::Bias: return "bias";
        case SegmentKind::Embedding: return "embedding";
    }
    return "?";
}

SegmentKind segment_kind_from_string(const std::string& s) {
    if (s == "matrix") return SegmentKind::Matrix;
    if (s == "bias") return SegmentKind::Bias;
    if (s == "embedding") return SegmentKind::Embedding;
    fail(ErrorKind::Schema, "unknown segment kind '" + s + "'");
}

std::size_t Segment::size() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

const Segment& LayerLayout::push(Segment seg) {
    require(seg.size() > 0, ErrorKind::Config, "layout segment '" + seg.name + "' is empty");
    for (const auto& s : segments_)
        require(s.name != seg.name, ErrorKind::Config, "duplicate layout segment '" + seg.name + "'");
    seg.offset = total_;
    total_ += seg.size();
    segments_.push_back(std::move(seg));
    return segments_.back();
}

const Segment& LayerLayout::add_matrix(const std::string& name, std::size_t fan_out, std::size_t fan_in) {
    return push({name, 0, {fan_out, fan_in}, fan_in, fan_out, SegmentKind::Matrix});
}

const Segment& LayerLayout::add_bias(const std::string& name, std::size_t size) {
    return push({name, 0, {size}, 1, size, SegmentKind::Bias});
}

const Segment& LayerLayout::add_embedding(const std::string& name, std::size_t rows, std::size_t dim) {
    return push({name, 0, {rows, dim}, 1, dim, SegmentKind::Embedding});
}

const Segment& LayerLayout::segment(const std::string& name) const {
    for (const auto& s : segments_)
        if (s.name == name) return s;
    fail(ErrorKind::Config, "no layout segment named '" + name + "'");
}

void LayerLayout::validate() const {
    std::size_t expect = 0;
    for (const auto& s : segments_) {
        require(s.offset == expect, ErrorKind::Config, "layout segment '" + s.name + "' is not contiguous");
        require(s.size() > 0, ErrorKind::Config, "layout segment '" + s.name + "' is empty");
        if (s.kind == SegmentKind::Matrix)
            require(s.fan_in > 0 && s.fan_out > 0, ErrorKind::Config,
                    "matrix segment '" + s.name + "' needs positive fan_in/fan_out");
        expect += s.size();
    }
    require(expect == total_, ErrorKind::Config, "layout total does not match its segments");
}

std::span<double> ParamVector::segment(const std::string& name) {
    const auto& s = layout.segment(name);
    return std::span<double>(values).subspan(s.offset, s.size());
}

std::span<const double> ParamVector::segment(const std::string& name) const {
    const auto& s = layout.segment(name);
    return std::span<const double>(values).subspan(s.offset, s.size());
}

void ParamVector::check() const {
    require(values.size() == layout.total(), ErrorKind::Dimension, "parameter vector length does not match layout");
    for (double v : values) require(std::isfinite(v), ErrorKind::Numeric, "non-finite parameter value");
}

std::size_t TaskMask::ones() const {
    return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), uint8_t{1}));
}

std::size_t MaskSet::param_count() const { return masks.empty() ? 0 : masks.begin()->second.size(); }

std::vector<TaskId> MaskSet::task_ids() const {
    std::vector<TaskId> ids;
    for (const auto& [id, _] : masks) ids.push_back(id);
    return ids;
}

const TaskMask& MaskSet::at(TaskId id) const {
    auto it = masks.find(id);
    require(it != masks.end(), ErrorKind::Config, "no mask for task " + std::to_string(id));
    return it->second;
}

TaskMask& MaskSet::at(TaskId id) {
    auto it = masks.find(id);
    require(it != masks.end(), ErrorKind::Config, "no mask for task " + std::to_string(id));
    return it->second;
}

MaskSet MaskSet::all_ones(std::size_t n, const std::vector<TaskId>& tasks) {
    MaskSet set;
    for (TaskId id : tasks) set.masks[id] = TaskMask{id, std::vector<uint8_t>(n, 1)};
    return set;
}

namespace {

double raw_ratio(const Segment& s) {
    const double in = static_cast<double>(s.kind == SegmentKind::Matrix ? s.fan_in : 1);
    const double out = static_cast<double>(s.fan_out);
    return (in + out) / (in * out);
}

double active_mass(const std::vector<double>& ratios, const std::vector<double>& sizes, double eps) {
    double m = 0.0;
    for (std::size_t i = 0; i < ratios.size(); ++i) m += std::min(1.0, eps * ratios[i]) * sizes[i];
    return m;
}

}  // namespace

std::vector<double> erk_densities(const LayerLayout& layout, double sparsity) {
    require(sparsity >= 0.0 && sparsity < 1.0, ErrorKind::Config, "sparsity must lie in [0, 1)");
    layout.validate();
    const auto& segs = layout.segments();
    std::vector<double> ratios, sizes;
    for (const auto& s : segs) {
        ratios.push_back(raw_ratio(s));
        sizes.push_back(static_cast<double>(s.size()));
    }
    if (sparsity == 0.0) return std::vector<double>(segs.size(), 1.0);

    const double target = (1.0 - sparsity) * static_cast<double>(layout.total());
    double lo = 0.0;
    double hi = 1.0 / *std::min_element(ratios.begin(), ratios.end());
    for (int it = 0; it < 200 && hi - lo > 0.0; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mid <= lo || mid >= hi) break;
        (active_mass(ratios, sizes, mid) < target ? lo : hi) = mid;
    }
    std::vector<double> d(segs.size());
    for (std::size_t i = 0; i < segs.size(); ++i) d[i] = std::min(1.0, hi * ratios[i]);
    return d;
}

std::vector<std::size_t> erk_active_counts(const LayerLayout& layout, double sparsity) {
    const auto dens = erk_densities(layout, sparsity);
    const auto& segs = layout.segments();
    const double exact_total = (1.0 - sparsity) * static_cast<double>(layout.total());
    const auto target = static_cast<std::size_t>(std::nearbyint(exact_total));  // FE_TONEAREST: half-to-even

    std::vector<std::size_t> counts(segs.size());
    std::vector<double> ideal(segs.size());
    std::size_t sum = 0;
    for (std::size_t i = 0; i < segs.size(); ++i) {
        ideal[i] = dens[i] * static_cast<double>(segs[i].size());
        counts[i] = std::min(segs[i].size(), static_cast<std::size_t>(std::nearbyint(ideal[i])));
        sum += counts[i];
    }
    // Per-segment rounding can drift the global count by up to half a unit per
    // segment; repair with the segments whose rounding error was largest.
    std::vector<std::size_t> order(segs.size());
    std::iota(order.begin(), order.end(), 0);
    while (sum < target) {
        std::size_t best = segs.size();
        double best_gap = -1e300;
        for (std::size_t i : order) {
            if (counts[i] >= segs[i].size()) continue;
            const double gap = ideal[i] - static_cast<double>(counts[i]);
            if (gap > best_gap) best_gap = gap, best = i;
        }
        if (best == segs.size()) break;
        ++counts[best];
        ++sum;
    }
    while (sum > target) {
        std::size_t best = segs.size();
        double best_gap = -1e300;
        for (std::size_t i : order) {
            if (counts[i] == 0) continue;
            const double gap = static_cast<double>(counts[i]) - ideal[i];
            if (gap > best_gap) best_gap = gap, best = i;
        }
        if (best == segs.size()) break;
        --counts[best];
        --sum;
    }
    return counts;
}

MaskSet erk_init(const LayerLayout& layout, double sparsity, const std::vector<TaskId>& task_ids, uint64_t seed) {
    require(!task_ids.empty(), ErrorKind::Config, "erk_init: empty task list");
    const auto counts = erk_active_counts(layout, sparsity);
    const auto& segs = layout.segments();

    MaskSet set;
    set.sparsity = sparsity;
    for (TaskId id : task_ids) {
        Rng rng(derive_seed(seed, "erk", static_cast<uint64_t>(id)));
        TaskMask mask{id, std::vector<uint8_t>(layout.total(), 0)};
        std::vector<std::size_t> pool;
        for (std::size_t s = 0; s < segs.size(); ++s) {
            const std::size_t n = segs[s].size();
            pool.resize(n);
            std::iota(pool.begin(), pool.end(), std::size_t{0});
            // Partial Fisher-Yates: first counts[s] entries become the sample.
            for (std::size_t k = 0; k < counts[s]; ++k) {
                const std::size_t j = k + static_cast<std::size_t>(rng.index(n - k));
                std::swap(pool[k], pool[j]);
                mask.bits[segs[s].offset + pool[k]] = 1;
            }
        }
        set.masks.emplace(id, std::move(mask));
    }
    return set;
}

std::vector<double> apply_mask(std::span<const double> theta, const TaskMask& mask) {
    require(theta.size() == mask.size(), ErrorKind::Dimension,
            "apply_mask: theta has " + std::to_string(theta.size()) + " entries, mask has " +
                std::to_string(mask.size()));
    std::vector<double> out(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) out[i] = mask.bits[i] ? theta[i] : 0.0;
    return out;
}

std::vector<std::vector<double>> mask_hamming_matrix(const MaskSet& masks) {
    std::vector<const TaskMask*> ms;
    for (const auto& [_, m] : masks.masks) ms.push_back(&m);
    const std::size_t n = ms.size();
    std::vector<std::vector<double>> out(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            require(ms[i]->size() == ms[j]->size(), ErrorKind::Dimension, "masks differ in length");
            std::size_t diff = 0;
            for (std::size_t k = 0; k < ms[i]->size(); ++k) diff += ms[i]->bits[k] != ms[j]->bits[k];
            const double h = ms[i]->size() ? static_cast<double>(diff) / static_cast<double>(ms[i]->size()) : 0.0;
            out[i][j] = out[j][i] = h;
        }
    }
    return out;
}

std::vector<double> segment_densities(const LayerLayout& layout, const TaskMask& mask) {
    require(mask.size() == layout.total(), ErrorKind::Dimension, "mask length does not match layout");
    std::vector<double> out;
    for (const auto& s : layout.segments()) {
        std::size_t ones = 0;
        for (std::size_t k = 0; k < s.size(); ++k) ones += mask.bits[s.offset + k];
        out.push_back(static_cast<double>(ones) / static_cast<double>(s.size()));
    }
    return out;
}

std::vector<uint64_t> pack_bits(const std::vector<uint8_t>& bits) {
    std::vector<uint64_t> words((bits.size() + 63) / 64, 0);
    for (std::size_t i = 0; i < bits.size(); ++i)
        if (bits[i]) words[i / 64] |= uint64_t{1} << (i % 64);
    return words;
}

std::vector<uint8_t> unpack_bits(std::span<const uint64_t> words, std::size_t n) {
    require(words.size() * 64 >= n, ErrorKind::Dimension, "bit blob too short for mask length");
    std::vector<uint8_t> bits(n);
    for (std::size_t i = 0; i < n; ++i) bits[i] = (words[i / 64] >> (i % 64)) & 1u;
    return bits;
}

}  // namespace harmony
