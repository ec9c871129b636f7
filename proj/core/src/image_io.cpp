#include "fsc/io.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

#include "fsc/common.hpp"

namespace fsc {

void write_ppm(const std::string& path, const Tensor<float>& img) {
    if (img.ndim() != 3 || img.dim(0) != 3) throw DataError("ppm: image must be [3,H,W]");
    int H = img.dim(1), W = img.dim(2);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("ppm: cannot open for write: " + path);
    out << "P6\n" << W << " " << H << "\n255\n";
    std::vector<unsigned char> row(size_t(W) * 3);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c) {
                float v = img[(int64_t(c) * H + y) * W + x];
                v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
                row[size_t(x) * 3 + size_t(c)] = (unsigned char)(std::lround(v * 255.0f));
            }
        out.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
    }
    if (!out) throw DataError("ppm: write failed: " + path);
}

namespace {

int read_ppm_int(std::istream& in) {
    // skip whitespace and '#' comments, then parse a decimal integer
    int ch = in.get();
    while (ch != EOF && (ch == ' ' || ch == '\t' || ch == '\r' || ch == '\n' || ch == '#')) {
        if (ch == '#')
            while (ch != EOF && ch != '\n') ch = in.get();
        ch = in.get();
    }
    if (ch == EOF || ch < '0' || ch > '9') throw DataError("ppm: malformed header");
    int v = 0;
    while (ch >= '0' && ch <= '9') {
        v = v * 10 + (ch - '0');
        if (v > 1 << 20) throw DataError("ppm: header value out of range");
        ch = in.get();
    }
    return v;
}

}  // namespace

Tensor<float> read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("ppm: cannot open: " + path);
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    if (m0 != 'P' || m1 != '6') throw DataError("ppm: not a P6 file: " + path);
    int W = read_ppm_int(in);
    int H = read_ppm_int(in);
    int maxval = read_ppm_int(in);
    if (maxval != 255) throw DataError("ppm: only maxval 255 supported");
    if (W < 1 || H < 1) throw DataError("ppm: bad dimensions");
    std::vector<unsigned char> bytes(size_t(W) * size_t(H) * 3);
    in.read(reinterpret_cast<char*>(bytes.data()), std::streamsize(bytes.size()));
    if (in.gcount() != std::streamsize(bytes.size())) throw DataError("ppm: truncated: " + path);
    Tensor<float> img({3, H, W});
    const float inv = 1.0f / 255.0f;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c)
                img[(int64_t(c) * H + y) * W + x] = inv * float(bytes[(size_t(y) * W + x) * 3 + size_t(c)]);
    return img;
}

}  // namespace fsc
