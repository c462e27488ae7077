#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dpidm/tensor.hpp"

namespace dpidm {

// Minimal PNG codec: 8-bit grayscale / RGB, non-interlaced. The writer emits
// filter-0 scanlines; the reader understands all five standard filters.

struct ImageU8 {
    int64_t height = 0;
    int64_t width = 0;
    int channels = 0;  // 1 or 3
    std::vector<uint8_t> pixels;  // row-major, interleaved
};

namespace pngdetail {

inline void put_u32(std::vector<uint8_t>& v, uint32_t x) {
    v.push_back(static_cast<uint8_t>(x >> 24));
    v.push_back(static_cast<uint8_t>(x >> 16));
    v.push_back(static_cast<uint8_t>(x >> 8));
    v.push_back(static_cast<uint8_t>(x));
}

inline uint32_t read_u32(const uint8_t* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
           (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

inline void write_chunk(std::vector<uint8_t>& out, const char type[4],
                        const std::vector<uint8_t>& payload) {
    put_u32(out, static_cast<uint32_t>(payload.size()));
    const size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    const uint32_t crc = static_cast<uint32_t>(
        crc32(0, out.data() + start, static_cast<uInt>(out.size() - start)));
    put_u32(out, crc);
}

inline uint8_t paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return static_cast<uint8_t>(a);
    if (pb <= pc) return static_cast<uint8_t>(b);
    return static_cast<uint8_t>(c);
}

}  // namespace pngdetail

inline std::vector<uint8_t> encode_png(const ImageU8& img) {
    if (img.channels != 1 && img.channels != 3) throw IoError("png: channels must be 1 or 3");
    const int64_t stride = img.width * img.channels;
    std::vector<uint8_t> raw(static_cast<size_t>(img.height * (stride + 1)));
    for (int64_t r = 0; r < img.height; ++r) {
        raw[static_cast<size_t>(r * (stride + 1))] = 0;  // filter 0
        std::memcpy(raw.data() + r * (stride + 1) + 1, img.pixels.data() + r * stride,
                    static_cast<size_t>(stride));
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> compressed(bound);
    if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw IoError("png: deflate failed");
    compressed.resize(bound);

    std::vector<uint8_t> out{0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<uint8_t> ihdr;
    pngdetail::put_u32(ihdr, static_cast<uint32_t>(img.width));
    pngdetail::put_u32(ihdr, static_cast<uint32_t>(img.height));
    ihdr.push_back(8);                                        // bit depth
    ihdr.push_back(img.channels == 3 ? 2 : 0);                // color type
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    pngdetail::write_chunk(out, "IHDR", ihdr);
    pngdetail::write_chunk(out, "IDAT", compressed);
    pngdetail::write_chunk(out, "IEND", {});
    return out;
}

inline void write_png(const std::filesystem::path& path, const ImageU8& img) {
    const std::vector<uint8_t> bytes = encode_png(img);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path.string());
}

inline ImageU8 decode_png(const std::vector<uint8_t>& bytes) {
    static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
        throw IoError("png: bad signature");
    ImageU8 img;
    std::vector<uint8_t> idat;
    size_t pos = 8;
    int bit_depth = 0, color_type = 0, interlace = 0;
    while (pos + 8 <= bytes.size()) {
        const uint32_t len = pngdetail::read_u32(bytes.data() + pos);
        if (pos + 12 + len > bytes.size()) throw IoError("png: truncated chunk");
        const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
        const uint8_t* payload = bytes.data() + pos + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            img.width = pngdetail::read_u32(payload);
            img.height = pngdetail::read_u32(payload + 4);
            bit_depth = payload[8];
            color_type = payload[9];
            interlace = payload[12];
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), payload, payload + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    if (bit_depth != 8 || (color_type != 0 && color_type != 2) || interlace != 0)
        throw IoError("png: unsupported format (need 8-bit gray or RGB, non-interlaced)");
    img.channels = color_type == 2 ? 3 : 1;
    const int64_t stride = img.width * img.channels;
    std::vector<uint8_t> raw(static_cast<size_t>(img.height * (stride + 1)));
    uLongf raw_len = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
        raw_len != raw.size())
        throw IoError("png: inflate failed");
    img.pixels.resize(static_cast<size_t>(img.height * stride));
    const int bpp = img.channels;
    for (int64_t r = 0; r < img.height; ++r) {
        const uint8_t filter = raw[static_cast<size_t>(r * (stride + 1))];
        const uint8_t* src = raw.data() + r * (stride + 1) + 1;
        uint8_t* dst = img.pixels.data() + r * stride;
        const uint8_t* up = r > 0 ? img.pixels.data() + (r - 1) * stride : nullptr;
        for (int64_t i = 0; i < stride; ++i) {
            const int left = i >= bpp ? dst[i - bpp] : 0;
            const int above = up ? up[i] : 0;
            const int upleft = (up && i >= bpp) ? up[i - bpp] : 0;
            int v = src[i];
            switch (filter) {
                case 0: break;
                case 1: v += left; break;
                case 2: v += above; break;
                case 3: v += (left + above) / 2; break;
                case 4: v += pngdetail::paeth(left, above, upleft); break;
                default: throw IoError("png: bad filter byte");
            }
            dst[i] = static_cast<uint8_t>(v);
        }
    }
    return img;
}

inline ImageU8 read_png(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path.string());
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_png(bytes);
}

// [C,H,W] float in [0,1] <-> interleaved u8. Values are quantized to the
// 8-bit grid, so float->u8->float round-trips exactly for grid-aligned data.
template <typename T>
ImageU8 to_image_u8(const Tensor<T>& chw) {
    if (chw.rank() != 3 || (chw.shape[0] != 1 && chw.shape[0] != 3))
        throw ShapeError("to_image_u8 expects [1|3,H,W], got " + shape_str(chw.shape));
    ImageU8 img;
    img.channels = static_cast<int>(chw.shape[0]);
    img.height = chw.shape[1];
    img.width = chw.shape[2];
    img.pixels.resize(static_cast<size_t>(img.height * img.width * img.channels));
    const int64_t hw = img.height * img.width;
    for (int64_t p = 0; p < hw; ++p)
        for (int c = 0; c < img.channels; ++c) {
            double v = static_cast<double>(chw[c * hw + p]);
            v = std::min(1.0, std::max(0.0, v));
            img.pixels[static_cast<size_t>(p * img.channels + c)] =
                static_cast<uint8_t>(std::lround(v * 255.0));
        }
    return img;
}

template <typename T>
Tensor<T> from_image_u8(const ImageU8& img) {
    Tensor<T> out(Shape{img.channels, img.height, img.width});
    const int64_t hw = img.height * img.width;
    for (int64_t p = 0; p < hw; ++p)
        for (int c = 0; c < img.channels; ++c)
            out[c * hw + p] = static_cast<T>(img.pixels[static_cast<size_t>(p * img.channels + c)]) /
                              T(255);
    return out;
}

}  // namespace dpidm
