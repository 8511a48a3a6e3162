#include "vlp/media.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "vlp/errors.hpp"

namespace vlp {

namespace {

constexpr char kMagic[4] = {'A', 'L', 'P', 'V'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ofstream& out, std::uint32_t v) {
    std::uint8_t b[4] = {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8),
                         static_cast<std::uint8_t>(v >> 16),
                         static_cast<std::uint8_t>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::ifstream& in, const std::string& path) {
    std::uint8_t b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw IntegrityError("alpv: truncated header in '" + path + "'");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

FrameArray to_array(const FrameStack& s) {
    FrameArray a{s.t, s.h, s.w, s.c, {}};
    a.data.resize(s.data.size());
    for (std::size_t i = 0; i < s.data.size(); ++i) {
        a.data[i] = static_cast<double>(s.data[i]) / 255.0;
    }
    return a;
}

void write_alpv(const FrameStack& s, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("alpv: cannot write '" + path + "'");
    out.write(kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(s.t));
    put_u32(out, static_cast<std::uint32_t>(s.h));
    put_u32(out, static_cast<std::uint32_t>(s.w));
    put_u32(out, static_cast<std::uint32_t>(s.c));
    out.write(reinterpret_cast<const char*>(s.data.data()),
              static_cast<std::streamsize>(s.data.size()));
    if (!out) throw DataError("alpv: write failed for '" + path + "'");
}

FrameStack read_alpv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("alpv: cannot open '" + path + "'");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) {
        throw IntegrityError("alpv: bad magic in '" + path + "'");
    }
    const std::uint32_t version = get_u32(in, path);
    if (version != kVersion) {
        throw IntegrityError("alpv: unsupported version " + std::to_string(version) +
                             " in '" + path + "'");
    }
    FrameStack s;
    s.t = get_u32(in, path);
    s.h = get_u32(in, path);
    s.w = get_u32(in, path);
    s.c = get_u32(in, path);
    s.data.resize(s.pixel_count());
    in.read(reinterpret_cast<char*>(s.data.data()), static_cast<std::streamsize>(s.data.size()));
    if (!in) throw IntegrityError("alpv: truncated body in '" + path + "'");
    return s;
}

FrameStack read_ppm_sequence(std::span<const std::string> paths) {
    if (paths.empty()) throw DataError("ppm: empty frame list");
    FrameStack s;
    for (std::size_t fi = 0; fi < paths.size(); ++fi) {
        std::ifstream in(paths[fi], std::ios::binary);
        if (!in) throw DataError("ppm: cannot open '" + paths[fi] + "'");
        std::string magic;
        in >> magic;
        if (magic != "P6") throw DataError("ppm: '" + paths[fi] + "' is not binary P6");
        std::size_t w = 0, h = 0, maxval = 0;
        in >> w >> h >> maxval;
        if (!in || maxval != 255) throw DataError("ppm: unsupported header in '" + paths[fi] + "'");
        in.get();  // single whitespace before the raster
        if (fi == 0) {
            s.t = paths.size();
            s.h = h;
            s.w = w;
            s.c = 3;
            s.data.resize(s.pixel_count());
        } else if (w != s.w || h != s.h) {
            throw DataError("ppm: frame size mismatch in '" + paths[fi] + "'");
        }
        in.read(reinterpret_cast<char*>(s.data.data() + fi * h * w * 3),
                static_cast<std::streamsize>(h * w * 3));
        if (!in) throw DataError("ppm: truncated raster in '" + paths[fi] + "'");
    }
    return s;
}

FrameArray select_frames(const FrameArray& a, std::span<const std::size_t> indices) {
    FrameArray out{indices.size(), a.h, a.w, a.c, {}};
    out.data.reserve(indices.size() * a.h * a.w * a.c);
    const std::size_t frame = a.h * a.w * a.c;
    for (std::size_t idx : indices) {
        if (idx >= a.t) throw InputError("select_frames: index " + std::to_string(idx) +
                                         " out of range for " + std::to_string(a.t) + " frames");
        out.data.insert(out.data.end(), a.data.begin() + static_cast<std::ptrdiff_t>(idx * frame),
                        a.data.begin() + static_cast<std::ptrdiff_t>((idx + 1) * frame));
    }
    return out;
}

FrameArray crop_array(const FrameArray& a, std::size_t x0, std::size_t y0, std::size_t x1,
                      std::size_t y1) {
    if (!(x0 < x1 && x1 <= a.w && y0 < y1 && y1 <= a.h)) {
        throw InputError("crop: bounds [" + std::to_string(x0) + "," + std::to_string(x1) +
                         ")x[" + std::to_string(y0) + "," + std::to_string(y1) +
                         ") invalid for " + std::to_string(a.w) + "x" + std::to_string(a.h));
    }
    FrameArray out{a.t, y1 - y0, x1 - x0, a.c, {}};
    out.data.resize(out.t * out.h * out.w * out.c);
    for (std::size_t t = 0; t < a.t; ++t) {
        for (std::size_t y = 0; y < out.h; ++y) {
            for (std::size_t x = 0; x < out.w; ++x) {
                for (std::size_t ch = 0; ch < a.c; ++ch) {
                    out.at(t, y, x, ch) = a.at(t, y0 + y, x0 + x, ch);
                }
            }
        }
    }
    return out;
}

FrameArray resize_bilinear(const FrameArray& a, std::size_t out_h, std::size_t out_w) {
    if (out_h == 0 || out_w == 0) throw InputError("resize: zero output extent");
    if (out_h == a.h && out_w == a.w) return a;
    FrameArray out{a.t, out_h, out_w, a.c, {}};
    out.data.resize(out.t * out.h * out.w * out.c);
    const double sy = static_cast<double>(a.h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(a.w) / static_cast<double>(out_w);
    for (std::size_t t = 0; t < a.t; ++t) {
        for (std::size_t y = 0; y < out_h; ++y) {
            const double src_y = std::max(0.0, (static_cast<double>(y) + 0.5) * sy - 0.5);
            const std::size_t y0 = std::min(a.h - 1, static_cast<std::size_t>(src_y));
            const std::size_t y1 = std::min(a.h - 1, y0 + 1);
            const double fy = src_y - static_cast<double>(y0);
            for (std::size_t x = 0; x < out_w; ++x) {
                const double src_x = std::max(0.0, (static_cast<double>(x) + 0.5) * sx - 0.5);
                const std::size_t x0 = std::min(a.w - 1, static_cast<std::size_t>(src_x));
                const std::size_t x1 = std::min(a.w - 1, x0 + 1);
                const double fx = src_x - static_cast<double>(x0);
                for (std::size_t ch = 0; ch < a.c; ++ch) {
                    const double top = a.at(t, y0, x0, ch) * (1.0 - fx) + a.at(t, y0, x1, ch) * fx;
                    const double bot = a.at(t, y1, x0, ch) * (1.0 - fx) + a.at(t, y1, x1, ch) * fx;
                    out.at(t, y, x, ch) = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    return out;
}

}  // namespace vlp
