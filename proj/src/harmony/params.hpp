#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace harmony {

enum class SegmentKind { Matrix, Bias, Embedding };

const char* to_string(SegmentKind kind);
SegmentKind segment_kind_from_string(const std::string& s);

struct Segment {
    std::string name;
    std::size_t offset = 0;
    std::vector<std::size_t> shape;
    std::size_t fan_in = 1;
    std::size_t fan_out = 1;
    SegmentKind kind = SegmentKind::Matrix;

    std::size_t size() const;

    friend bool operator==(const Segment&, const Segment&) = default;
};

// Named, contiguous partition of the flat parameter vector.
class LayerLayout {
public:
    LayerLayout() = default;

    // Appends a segment at the current end. Matrix shapes are [fan_out, fan_in].
    const Segment& add_matrix(const std::string& name, std::size_t fan_out, std::size_t fan_in);
    const Segment& add_bias(const std::string& name, std::size_t size);
    const Segment& add_embedding(const std::string& name, std::size_t rows, std::size_t dim);

    const std::vector<Segment>& segments() const { return segments_; }
    const Segment& segment(const std::string& name) const;
    std::size_t total() const { return total_; }

    // Throws Config if segments overlap, leave gaps or violate fan constraints.
    void validate() const;

    friend bool operator==(const LayerLayout&, const LayerLayout&) = default;

private:
    const Segment& push(Segment seg);

    std::vector<Segment> segments_;
    std::size_t total_ = 0;
};

struct ParamVector {
    std::vector<double> values;
    LayerLayout layout;

    ParamVector() = default;
    explicit ParamVector(LayerLayout l) : values(l.total(), 0.0), layout(std::move(l)) {}

    std::size_t size() const { return values.size(); }
    std::span<double> segment(const std::string& name);
    std::span<const double> segment(const std::string& name) const;

    void check() const;
};

using TaskId = int;

struct TaskMask {
    TaskId task_id = 0;
    std::vector<uint8_t> bits;

    std::size_t size() const { return bits.size(); }
    std::size_t ones() const;
};

struct MaskSet {
    std::map<TaskId, TaskMask> masks;
    double sparsity = 0.0;

    std::size_t param_count() const;
    std::vector<TaskId> task_ids() const;
    const TaskMask& at(TaskId id) const;
    TaskMask& at(TaskId id);

    static MaskSet all_ones(std::size_t n, const std::vector<TaskId>& tasks);
};

// Per-segment ERK densities for a global sparsity target.
std::vector<double> erk_densities(const LayerLayout& layout, double sparsity);

// Per-segment active counts, rounded half-to-even from the ERK densities.
std::vector<std::size_t> erk_active_counts(const LayerLayout& layout, double sparsity);

MaskSet erk_init(const LayerLayout& layout, double sparsity, const std::vector<TaskId>& task_ids,
                 uint64_t seed);

std::vector<double> apply_mask(std::span<const double> theta, const TaskMask& mask);

// Normalized Hamming distances, rows/cols in ascending task_id order.
std::vector<std::vector<double>> mask_hamming_matrix(const MaskSet& masks);

// Fraction of active bits per layout segment.
std::vector<double> segment_densities(const LayerLayout& layout, const TaskMask& mask);

// Bit-packing: little-endian 64-bit words, bit i of the mask at bit (i % 64)
// of word (i / 64).
std::vector<uint64_t> pack_bits(const std::vector<uint8_t>& bits);
std::vector<uint8_t> unpack_bits(std::span<const uint64_t> words, std::size_t n);

}  // namespace harmony
