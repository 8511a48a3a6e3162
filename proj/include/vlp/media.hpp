#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace vlp {

/// 8-bit frame stack, the canonical on-disk media form (file magic "ALPV").
struct FrameStack {
    std::size_t t = 0, h = 0, w = 0, c = 0;
    std::vector<std::uint8_t> data;  // row-major t,h,w,c

    std::size_t pixel_count() const { return t * h * w * c; }
    std::uint8_t& at(std::size_t ti, std::size_t y, std::size_t x, std::size_t ch) {
        return data[((ti * h + y) * w + x) * c + ch];
    }
    std::uint8_t at(std::size_t ti, std::size_t y, std::size_t x, std::size_t ch) const {
        return data[((ti * h + y) * w + x) * c + ch];
    }
};

/// Double-precision pixels scaled to [0,1]; what the encoders consume.
struct FrameArray {
    std::size_t t = 0, h = 0, w = 0, c = 0;
    std::vector<double> data;

    double at(std::size_t ti, std::size_t y, std::size_t x, std::size_t ch) const {
        return data[((ti * h + y) * w + x) * c + ch];
    }
    double& at(std::size_t ti, std::size_t y, std::size_t x, std::size_t ch) {
        return data[((ti * h + y) * w + x) * c + ch];
    }
};

FrameArray to_array(const FrameStack& s);

void write_alpv(const FrameStack& s, const std::string& path);
FrameStack read_alpv(const std::string& path);

/// Binary (P6) PPM frames, one file per frame, identical dimensions.
FrameStack read_ppm_sequence(std::span<const std::string> paths);

/// Keep the listed frames, in the given order.
FrameArray select_frames(const FrameArray& a, std::span<const std::size_t> indices);

/// Pixel crop [x0,x1) x [y0,y1), identical across frames.
FrameArray crop_array(const FrameArray& a, std::size_t x0, std::size_t y0, std::size_t x1,
                      std::size_t y1);

FrameArray resize_bilinear(const FrameArray& a, std::size_t out_h, std::size_t out_w);

}  // namespace vlp
