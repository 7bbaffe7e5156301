#pragma once

#include <span>
#include <string>
#include <vector>

#include "slu/common.hpp"

namespace slu {

// Corpus-global per-dimension mean/variance accumulator.
struct CmvnStats {
    std::vector<double> mean;
    std::vector<double> variance;
    uint64_t count = 0;

    int dim() const { return static_cast<int>(mean.size()); }
};

// Exact corpus moments via a numerically stable single-pass (Chan et al.
// parallel variance) accumulation. Throws on an empty corpus.
CmvnStats accumulate_cmvn(std::span<const Matrix> corpus);

// Deterministic associative merge of two shard accumulators.
CmvnStats merge_cmvn(const CmvnStats& a, const CmvnStats& b);

// out[t][d] = (x[t][d] - mean[d]) / sqrt(variance[d] + eps)
Matrix apply_cmvn(const Matrix& x, const CmvnStats& stats, double eps = 1e-8);

// Concatenates windows of `width` consecutive frames advancing by `stride`.
// Partial trailing windows are dropped; T < width yields an empty matrix.
Matrix stack_frames(const Matrix& x, int width = 8, int stride = 3);

// Output length of stack_frames: floor((T - width)/stride) + 1 when T >= width.
int stacked_length(int frame_count, int width, int stride);

// Binary feature container: header {magic "FEAT", version u32, T u32, D u32,
// reserved u32}, then T*D little-endian f32, row-major by frame.
void write_feature_file(const std::string& path, const Matrix& x, uint32_t reserved = 0);
Matrix read_feature_file(const std::string& path, uint32_t* reserved = nullptr);

// CmvnStats reuse the container with T=2 (row 0 mean, row 1 variance) and the
// frame count in the reserved header field.
void write_cmvn_file(const std::string& path, const CmvnStats& stats);
CmvnStats read_cmvn_file(const std::string& path);

}  // namespace slu
