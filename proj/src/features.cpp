#include "slu/features.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

namespace slu {

namespace {

constexpr char kFeatMagic[4] = {'F', 'E', 'A', 'T'};
constexpr uint32_t kFeatVersion = 1;

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& os, float v) {
    uint32_t u;
    std::memcpy(&u, &v, 4);
    put_u32(os, u);
}

float get_f32(std::istream& is) {
    uint32_t u = get_u32(is);
    float v;
    std::memcpy(&v, &u, 4);
    return v;
}

}  // namespace

CmvnStats accumulate_cmvn(std::span<const Matrix> corpus) {
    CmvnStats acc;
    for (const Matrix& x : corpus) {
        if (x.rows() == 0) continue;
        CmvnStats cur;
        cur.mean.assign(x.cols(), 0.0);
        cur.variance.assign(x.cols(), 0.0);
        cur.count = static_cast<uint64_t>(x.rows());
        // two-pass moments per matrix, merged across matrices
        for (int t = 0; t < x.rows(); ++t)
            for (int d = 0; d < x.cols(); ++d) cur.mean[d] += x(t, d);
        for (int d = 0; d < x.cols(); ++d) cur.mean[d] /= static_cast<double>(x.rows());
        for (int t = 0; t < x.rows(); ++t)
            for (int d = 0; d < x.cols(); ++d) {
                double delta = x(t, d) - cur.mean[d];
                cur.variance[d] += delta * delta;
            }
        for (int d = 0; d < x.cols(); ++d) cur.variance[d] /= static_cast<double>(x.rows());
        acc = acc.count == 0 ? cur : merge_cmvn(acc, cur);
    }
    if (acc.count == 0) throw std::invalid_argument("accumulate_cmvn: no frames");
    return acc;
}

CmvnStats merge_cmvn(const CmvnStats& a, const CmvnStats& b) {
    if (a.count == 0) return b;
    if (b.count == 0) return a;
    if (a.dim() != b.dim()) throw std::invalid_argument("merge_cmvn: dimension mismatch");
    CmvnStats out;
    const double na = static_cast<double>(a.count);
    const double nb = static_cast<double>(b.count);
    const double n = na + nb;
    out.count = a.count + b.count;
    out.mean.resize(a.dim());
    out.variance.resize(a.dim());
    for (int d = 0; d < a.dim(); ++d) {
        double delta = b.mean[d] - a.mean[d];
        out.mean[d] = a.mean[d] + delta * nb / n;
        double m2 = a.variance[d] * na + b.variance[d] * nb + delta * delta * na * nb / n;
        out.variance[d] = m2 / n;
    }
    return out;
}

Matrix apply_cmvn(const Matrix& x, const CmvnStats& stats, double eps) {
    if (x.cols() != stats.dim()) throw std::invalid_argument("apply_cmvn: dimension mismatch");
    if (eps <= 0.0) throw std::invalid_argument("apply_cmvn: eps must be positive");
    Matrix out(x.rows(), x.cols());
    for (int d = 0; d < x.cols(); ++d) {
        double scale = 1.0 / std::sqrt(stats.variance[d] + eps);
        for (int t = 0; t < x.rows(); ++t) out(t, d) = (x(t, d) - stats.mean[d]) * scale;
    }
    return out;
}

int stacked_length(int frame_count, int width, int stride) {
    if (frame_count < width) return 0;
    return (frame_count - width) / stride + 1;
}

Matrix stack_frames(const Matrix& x, int width, int stride) {
    if (width < 1 || stride < 1) throw std::invalid_argument("stack_frames: width/stride >= 1");
    const int out_len = stacked_length(x.rows(), width, stride);
    Matrix out(out_len, width * x.cols());
    for (int i = 0; i < out_len; ++i)
        for (int w = 0; w < width; ++w)
            std::memcpy(out.row(i) + static_cast<size_t>(w) * x.cols(),
                        x.row(i * stride + w), sizeof(double) * x.cols());
    return out;
}

void write_feature_file(const std::string& path, const Matrix& x, uint32_t reserved) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_feature_file: cannot open " + path);
    os.write(kFeatMagic, 4);
    put_u32(os, kFeatVersion);
    put_u32(os, static_cast<uint32_t>(x.rows()));
    put_u32(os, static_cast<uint32_t>(x.cols()));
    put_u32(os, reserved);
    for (int t = 0; t < x.rows(); ++t)
        for (int d = 0; d < x.cols(); ++d) put_f32(os, static_cast<float>(x(t, d)));
    if (!os) throw std::runtime_error("write_feature_file: write failed on " + path);
}

Matrix read_feature_file(const std::string& path, uint32_t* reserved) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_feature_file: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kFeatMagic, 4) != 0)
        throw std::runtime_error("read_feature_file: bad magic in " + path);
    uint32_t version = get_u32(is);
    if (version != kFeatVersion)
        throw std::runtime_error("read_feature_file: unsupported version");
    uint32_t rows = get_u32(is);
    uint32_t cols = get_u32(is);
    uint32_t res = get_u32(is);
    if (reserved) *reserved = res;
    Matrix x(static_cast<int>(rows), static_cast<int>(cols));
    for (uint32_t t = 0; t < rows; ++t)
        for (uint32_t d = 0; d < cols; ++d) x(t, d) = get_f32(is);
    if (!is) throw std::runtime_error("read_feature_file: truncated " + path);
    return x;
}

void write_cmvn_file(const std::string& path, const CmvnStats& stats) {
    Matrix m(2, stats.dim());
    for (int d = 0; d < stats.dim(); ++d) {
        m(0, d) = stats.mean[d];
        m(1, d) = stats.variance[d];
    }
    write_feature_file(path, m, static_cast<uint32_t>(stats.count));
}

CmvnStats read_cmvn_file(const std::string& path) {
    uint32_t count = 0;
    Matrix m = read_feature_file(path, &count);
    if (m.rows() != 2) throw std::runtime_error("read_cmvn_file: expected 2 rows");
    CmvnStats stats;
    stats.count = count;
    stats.mean.assign(m.row(0), m.row(0) + m.cols());
    stats.variance.assign(m.row(1), m.row(1) + m.cols());
    return stats;
}

}  // namespace slu
