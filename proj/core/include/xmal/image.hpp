#pragma once

#include <filesystem>
#include <vector>

namespace xmal {

/// RGB image with values in [0, 1], stored height x width x 3 (interleaved).
struct ImageTensor {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  static ImageTensor filled(int height, int width, double value);

  double& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

  bool operator==(const ImageTensor&) const = default;
};

inline constexpr int kMinImageSide = 28;

/// Throws kShape / kInvalidArgument when dimensions are too small or any value
/// is non-finite or outside [0, 1].
void validate_image(const ImageTensor& image);

/// Binary PPM (P6), 8 bits per channel.
void write_ppm(const ImageTensor& image, const std::filesystem::path& path);
ImageTensor read_ppm(const std::filesystem::path& path);

/// Rounds every value to the nearest 8-bit level, matching a write/read cycle.
ImageTensor quantize8(const ImageTensor& image);

ImageTensor resize_bilinear(const ImageTensor& image, int height, int width);
/// Box-filter downsampling by an integer factor (partial edge blocks averaged).
ImageTensor box_downsample(const ImageTensor& image, int factor);
ImageTensor gaussian_blur(const ImageTensor& image, double sigma);
ImageTensor flip_horizontal(const ImageTensor& image);
ImageTensor crop(const ImageTensor& image, int top, int left, int height, int width);
ImageTensor clamp01(ImageTensor image);

double mean_squared_error(const ImageTensor& a, const ImageTensor& b);
/// Peak signal-to-noise ratio in dB for peak value 1; +inf for identical images.
double psnr(const ImageTensor& a, const ImageTensor& b);

}  // namespace xmal
