#include <png.h>
// jpeglib.h needs FILE and size_t declared first.
#include <cstdio>
#include <jpeglib.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstring>
#include <fstream>
#include <memory>
#include <numbers>

#include "rashnet/data.hpp"

namespace rashnet {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw DataError(path.string() + ": cannot open file");
  return f;
}

Image8 decode_png(const std::filesystem::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw DataError(path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  Image8 out;
  out.height = static_cast<int>(img.height);
  out.width = static_cast<int>(img.width);
  out.channels = 3;
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw DataError(path.string() + ": " + msg);
  }
  return out;
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

Image8 decode_jpeg(const std::filesystem::path& path) {
  FilePtr file = open_file(path, "rb");
  jpeg_decompress_struct cinfo;
  JpegError err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  // Nothing with a destructor may live between setjmp and longjmp.
  Image8* result = new Image8();
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    delete result;
    throw DataError(path.string() + ": " + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  result->width = static_cast<int>(cinfo.output_width);
  result->height = static_cast<int>(cinfo.output_height);
  result->channels = 3;
  result->pixels.resize(static_cast<std::size_t>(result->width) * result->height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = result->pixels.data() +
                   static_cast<std::size_t>(cinfo.output_scanline) * result->width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  Image8 out = std::move(*result);
  delete result;
  return out;
}

void check_image(const Image8& image) {
  if (image.height < 1 || image.width < 1) throw DataError("image has zero extent");
  if (image.channels != 3) {
    throw DataError("expected a 3-channel image, got " + std::to_string(image.channels));
  }
  if (image.pixels.size() != static_cast<std::size_t>(image.height) * image.width * 3) {
    throw DataError("image pixel buffer does not match its extent");
  }
}

struct Tap {
  std::int64_t lo, hi;
  double frac;
};

// Half-pixel-center source coordinate for destination index i.
Tap resize_tap(std::int64_t i, std::int64_t in, std::int64_t out) {
  double src = (static_cast<double>(i) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
  src = std::clamp(src, 0.0, static_cast<double>(in - 1));
  const auto lo = static_cast<std::int64_t>(std::floor(src));
  return {lo, std::min(lo + 1, in - 1), src - static_cast<double>(lo)};
}

double lerp(double a, double b, double t) {
  return a + t * (b - a);
}

}  // namespace

Image8 Image8::solid(int height, int width, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  Image8 img;
  img.height = height;
  img.width = width;
  img.pixels.resize(static_cast<std::size_t>(height) * width * 3);
  for (std::size_t i = 0; i < img.pixels.size(); i += 3) {
    img.pixels[i] = r;
    img.pixels[i + 1] = g;
    img.pixels[i + 2] = b;
  }
  return img;
}

Image8 decode_image(const std::filesystem::path& path) {
  unsigned char sig[8] = {};
  {
    FilePtr f = open_file(path, "rb");
    const std::size_t n = std::fread(sig, 1, sizeof sig, f.get());
    if (n < 3) throw DataError(path.string() + ": file too short to be an image");
  }
  if (png_sig_cmp(sig, 0, 8) == 0) return decode_png(path);
  if (sig[0] == 0xFF && sig[1] == 0xD8 && sig[2] == 0xFF) return decode_jpeg(path);
  throw DataError(path.string() + ": unsupported image encoding (PNG and JPEG only)");
}

void write_png(const std::filesystem::path& path, const Image8& image) {
  check_image(image);
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
    throw DataError(path.string() + ": " + img.message);
  }
}

void write_jpeg(const std::filesystem::path& path, const Image8& image, int quality) {
  check_image(image);
  FilePtr file = open_file(path, "wb");
  jpeg_compress_struct cinfo;
  jpeg_error_mgr err;
  cinfo.err = jpeg_std_error(&err);
  jpeg_create_compress(&cinfo);
  jpeg_stdio_dest(&cinfo, file.get());
  cinfo.image_width = static_cast<JDIMENSION>(image.width);
  cinfo.image_height = static_cast<JDIMENSION>(image.height);
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    auto* row = const_cast<JSAMPLE*>(image.pixels.data() +
                                     static_cast<std::size_t>(cinfo.next_scanline) * image.width * 3);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
}

Tensor preprocess(const Image8& image, const PreprocessOptions& opt) {
  check_image(image);
  if (opt.size < 1) throw std::invalid_argument("preprocess: size must be positive");
  const std::int64_t h = image.height, w = image.width, s = opt.size;
  Tensor out({3, s, s}, opt.dtype);
  std::vector<Tap> rows, cols;
  for (std::int64_t i = 0; i < s; ++i) {
    rows.push_back(resize_tap(i, h, s));
    cols.push_back(resize_tap(i, w, s));
  }
  auto px = [&](std::int64_t y, std::int64_t x, int c) {
    return static_cast<double>(image.pixels[static_cast<std::size_t>((y * w + x) * 3 + c)]);
  };
  dispatch_dtype(opt.dtype, [&]<class T>() {
    auto dst = out.data<T>();
    for (int c = 0; c < 3; ++c) {
      const double mean = opt.mean[static_cast<std::size_t>(c)];
      const double sd = opt.std[static_cast<std::size_t>(c)];
      for (std::int64_t y = 0; y < s; ++y) {
        const Tap& ty = rows[static_cast<std::size_t>(y)];
        for (std::int64_t x = 0; x < s; ++x) {
          const Tap& tx = cols[static_cast<std::size_t>(x)];
          const double top = lerp(px(ty.lo, tx.lo, c), px(ty.lo, tx.hi, c), tx.frac);
          const double bottom = lerp(px(ty.hi, tx.lo, c), px(ty.hi, tx.hi, c), tx.frac);
          const double v = lerp(top, bottom, ty.frac) / 255.0;
          dst[static_cast<std::size_t>((c * s + y) * s + x)] = static_cast<T>((v - mean) / sd);
        }
      }
    }
  });
  return out;
}

Tensor hflip(const Tensor& chw) {
  if (chw.rank() != 3) throw ShapeError("hflip: expected C×H×W, got " + shape_str(chw.shape()));
  const std::int64_t c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  Tensor out(chw.shape(), chw.dtype());
  dispatch_dtype(chw.dtype(), [&]<class T>() {
    auto src = chw.data<T>();
    auto dst = out.data<T>();
    for (std::int64_t row = 0; row < c * h; ++row) {
      for (std::int64_t x = 0; x < w; ++x) dst[row * w + x] = src[row * w + (w - 1 - x)];
    }
  });
  return out;
}

Tensor rotate(const Tensor& chw, double degrees) {
  if (chw.rank() != 3) throw ShapeError("rotate: expected C×H×W, got " + shape_str(chw.shape()));
  if (degrees == 0.0) return chw;
  const std::int64_t c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  const double rad = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cx = static_cast<double>(w - 1) / 2.0, cy = static_cast<double>(h - 1) / 2.0;
  Tensor out(chw.shape(), chw.dtype());
  dispatch_dtype(chw.dtype(), [&]<class T>() {
    auto src = chw.data<T>();
    auto dst = out.data<T>();
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        // Inverse map: destination pixel back into the source frame.
        const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
        const double sx = std::clamp(cx + cs * dx + sn * dy, 0.0, static_cast<double>(w - 1));
        const double sy = std::clamp(cy - sn * dx + cs * dy, 0.0, static_cast<double>(h - 1));
        const auto x0 = static_cast<std::int64_t>(std::floor(sx));
        const auto y0 = static_cast<std::int64_t>(std::floor(sy));
        const std::int64_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
        const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const T* p = src.data() + ch * h * w;
          const double top = lerp(p[y0 * w + x0], p[y0 * w + x1], fx);
          const double bottom = lerp(p[y1 * w + x0], p[y1 * w + x1], fx);
          dst[(ch * h + y) * w + x] = static_cast<T>(lerp(top, bottom, fy));
        }
      }
    }
  });
  return out;
}

Tensor augment(const Tensor& chw, std::mt19937_64& rng, const AugmentOptions& opt) {
  std::bernoulli_distribution flip(opt.flip_probability);
  std::uniform_real_distribution<double> angle(-opt.max_rotation_degrees, opt.max_rotation_degrees);
  const bool do_flip = flip(rng);
  const double degrees = angle(rng);
  Tensor out = do_flip ? hflip(chw) : chw;
  return rotate(out, degrees);
}

}  // namespace rashnet
