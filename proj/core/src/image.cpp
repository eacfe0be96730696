#include "xmal/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <string>

#include "xmal/error.hpp"

namespace xmal {

ImageTensor ImageTensor::filled(int height, int width, double value) {
  ImageTensor img;
  img.height = height;
  img.width = width;
  img.pixels.assign(static_cast<std::size_t>(height) * width * 3, value);
  return img;
}

void validate_image(const ImageTensor& image) {
  if (image.height < kMinImageSide || image.width < kMinImageSide) {
    fail(ErrorKind::kShape, "image must be at least " + std::to_string(kMinImageSide) + "x" +
                                std::to_string(kMinImageSide) + ", got " + std::to_string(image.height) +
                                "x" + std::to_string(image.width));
  }
  if (image.pixels.size() != static_cast<std::size_t>(image.height) * image.width * 3) {
    fail(ErrorKind::kShape, "image pixel buffer does not match its dimensions");
  }
  for (double v : image.pixels) {
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
      fail(ErrorKind::kInvalidArgument, "image values must be finite and within [0, 1]");
    }
  }
}

void write_ppm(const ImageTensor& image, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write image " + path.string());
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  std::string bytes(image.pixels.size(), '\0');
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    const double v = std::clamp(image.pixels[i], 0.0, 1.0);
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

ImageTensor read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kMissingFile, "image not found: " + path.string());
  std::string magic;
  int width = 0;
  int height = 0;
  int maxval = 0;
  in >> magic >> width >> height >> maxval;
  if (magic != "P6" || width <= 0 || height <= 0 || maxval != 255) {
    fail(ErrorKind::kMalformed, "unsupported PPM header in " + path.string());
  }
  in.get();
  ImageTensor img;
  img.width = width;
  img.height = height;
  std::string bytes(static_cast<std::size_t>(width) * height * 3, '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    fail(ErrorKind::kMalformed, "truncated PPM data in " + path.string());
  }
  img.pixels.resize(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    img.pixels[i] = static_cast<unsigned char>(bytes[i]) / 255.0;
  }
  return img;
}

ImageTensor quantize8(const ImageTensor& image) {
  ImageTensor out = image;
  for (double& v : out.pixels) v = std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  return out;
}

ImageTensor resize_bilinear(const ImageTensor& image, int height, int width) {
  ImageTensor out = ImageTensor::filled(height, width, 0.0);
  const double sy = static_cast<double>(image.height) / height;
  const double sx = static_cast<double>(image.width) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, image.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, image.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = image.at(y0, x0, c) * (1 - wx) + image.at(y0, x1, c) * wx;
        const double bottom = image.at(y1, x0, c) * (1 - wx) + image.at(y1, x1, c) * wx;
        out.at(y, x, c) = top * (1 - wy) + bottom * wy;
      }
    }
  }
  return out;
}

ImageTensor box_downsample(const ImageTensor& image, int factor) {
  if (factor <= 1) return image;
  const int h = (image.height + factor - 1) / factor;
  const int w = (image.width + factor - 1) / factor;
  ImageTensor out = ImageTensor::filled(h, w, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int y_end = std::min(image.height, (y + 1) * factor);
      const int x_end = std::min(image.width, (x + 1) * factor);
      const double n = static_cast<double>((y_end - y * factor) * (x_end - x * factor));
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int yy = y * factor; yy < y_end; ++yy) {
          for (int xx = x * factor; xx < x_end; ++xx) acc += image.at(yy, xx, c);
        }
        out.at(y, x, c) = acc / n;
      }
    }
  }
  return out;
}

ImageTensor gaussian_blur(const ImageTensor& image, double sigma) {
  if (sigma <= 0.0) return image;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    total += kernel[static_cast<std::size_t>(i + radius)];
  }
  for (double& k : kernel) k /= total;
  // Separable pass with clamp-to-edge borders.
  ImageTensor tmp = image;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const int xx = std::clamp(x + i, 0, image.width - 1);
          acc += kernel[static_cast<std::size_t>(i + radius)] * image.at(y, xx, c);
        }
        tmp.at(y, x, c) = acc;
      }
    }
  }
  ImageTensor out = tmp;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const int yy = std::clamp(y + i, 0, image.height - 1);
          acc += kernel[static_cast<std::size_t>(i + radius)] * tmp.at(yy, x, c);
        }
        out.at(y, x, c) = acc;
      }
    }
  }
  return out;
}

ImageTensor flip_horizontal(const ImageTensor& image) {
  ImageTensor out = image;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = image.at(y, image.width - 1 - x, c);
    }
  }
  return out;
}

ImageTensor crop(const ImageTensor& image, int top, int left, int height, int width) {
  if (top < 0 || left < 0 || top + height > image.height || left + width > image.width) {
    fail(ErrorKind::kShape, "crop window outside image");
  }
  ImageTensor out = ImageTensor::filled(height, width, 0.0);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = image.at(top + y, left + x, c);
    }
  }
  return out;
}

ImageTensor clamp01(ImageTensor image) {
  for (double& v : image.pixels) v = std::clamp(v, 0.0, 1.0);
  return image;
}

double mean_squared_error(const ImageTensor& a, const ImageTensor& b) {
  if (a.height != b.height || a.width != b.width) fail(ErrorKind::kShape, "mean_squared_error: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = a.pixels[i] - b.pixels[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.pixels.size());
}

double psnr(const ImageTensor& a, const ImageTensor& b) {
  const double mse = mean_squared_error(a, b);
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

}  // namespace xmal
