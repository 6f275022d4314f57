#include "fedcpc/frontend.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <numbers>

#include "fedcpc/errors.hpp"

namespace fedcpc::audio {

namespace {

// FFTW planning is not thread-safe; execution with new-array calls is.
std::mutex g_plan_mutex;

struct FftwDeleter {
  void operator()(void* p) const { fftw_free(p); }
};

class RealFft {
 public:
  explicit RealFft(std::size_t n) : n_(n) {
    in_.reset(static_cast<double*>(fftw_malloc(sizeof(double) * n)));
    out_.reset(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * (n / 2 + 1))));
    std::lock_guard lock(g_plan_mutex);
    plan_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), in_.get(), out_.get(), FFTW_ESTIMATE);
  }
  ~RealFft() {
    std::lock_guard lock(g_plan_mutex);
    fftw_destroy_plan(plan_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  double* input() { return in_.get(); }
  const fftw_complex* output() const { return out_.get(); }
  void execute() { fftw_execute(plan_); }

 private:
  std::size_t n_;
  std::unique_ptr<double, FftwDeleter> in_;
  std::unique_ptr<fftw_complex, FftwDeleter> out_;
  fftw_plan plan_{};
};

std::vector<double> hann(std::size_t n) {
  std::vector<double> w(n);
  if (n == 1) {
    w[0] = 1.0;
    return w;
  }
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n - 1));
  return w;
}

}  // namespace

void Waveform::validate() const {
  if (sample_rate_hz <= 0) throw ConfigError("waveform sample rate must be positive");
  for (double s : samples)
    if (!std::isfinite(s)) throw NonFiniteError("waveform contains a non-finite sample");
}

std::size_t frame_count(std::size_t num_samples, std::size_t window, std::size_t shift) {
  if (num_samples < window) return 0;
  return 1 + (num_samples - window) / shift;
}

ad::Tensor stft_frames(const Waveform& w, double window_ms, double shift_ms) {
  w.validate();
  auto window = static_cast<std::size_t>(std::lround(window_ms * w.sample_rate_hz / 1000.0));
  auto shift = static_cast<std::size_t>(std::lround(shift_ms * w.sample_rate_hz / 1000.0));
  if (window == 0 || shift == 0 || window > kFftSize) {
    throw ConfigError("stft: window must be in (0, " + std::to_string(kFftSize) + "] samples and shift positive");
  }
  std::size_t frames = frame_count(w.samples.size(), window, shift);
  if (frames == 0) {
    throw TooShortError("waveform of " + std::to_string(w.samples.size()) + " samples is shorter than one " +
                        std::to_string(window) + "-sample window");
  }
  const std::vector<double> taper = hann(window);
  RealFft fft(kFftSize);
  std::vector<double> out(frames * kFrameBins);
  for (std::size_t f = 0; f < frames; ++f) {
    double* in = fft.input();
    const double* src = w.samples.data() + f * shift;
    for (std::size_t i = 0; i < window; ++i) in[i] = src[i] * taper[i];
    std::fill(in + window, in + kFftSize, 0.0);
    fft.execute();
    const fftw_complex* spec = fft.output();
    for (std::size_t b = 0; b < kFrameBins; ++b) {
      double mag = std::hypot(spec[b][0], spec[b][1]);
      out[f * kFrameBins + b] = std::log(kLogFloor + mag);
    }
  }
  return ad::Tensor({frames, kFrameBins}, std::move(out));
}

FeatureSequence stack3(const ad::Tensor& frames, double frame_shift_s) {
  if (frames.rank() != 2) throw DimensionError("stack3: expected a T' x D frame matrix");
  std::size_t n = frames.rows();
  std::size_t d = frames.cols();
  if (n < kStack) throw TooShortError("stack3 needs at least 3 frames, got " + std::to_string(n));
  std::size_t rows = n / kStack;
  // Row-major storage makes three consecutive frames one contiguous block.
  std::vector<double> out(frames.values().begin(),
                          frames.values().begin() + static_cast<std::ptrdiff_t>(rows * kStack * d));
  return FeatureSequence{ad::Tensor({rows, kStack * d}, std::move(out)), frame_shift_s * kStack};
}

FeatureSequence compute_features(const Waveform& w) {
  return stack3(stft_frames(w), 10.0 / 1000.0);
}

void write_pcm16(const std::string& path, const Waveform& w) {
  w.validate();
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (double s : w.samples) {
    auto v = static_cast<std::int16_t>(std::clamp(std::lround(s * 32768.0), -32768L, 32767L));
    auto u = static_cast<std::uint16_t>(v);
    char bytes[2] = {static_cast<char>(u & 0xff), static_cast<char>(u >> 8)};
    out.write(bytes, 2);
  }
  std::ofstream len(path + ".len", std::ios::trunc);
  len << w.samples.size() << '\n';
  if (!out || !len) throw std::runtime_error("failed writing " + path);
}

Waveform read_pcm16(const std::string& path, int sample_rate_hz) {
  std::ifstream len_in(path + ".len");
  if (!len_in) throw std::runtime_error("missing length sidecar " + path + ".len");
  std::size_t count = 0;
  if (!(len_in >> count)) throw ParseError(path + ".len", 1, "expected a sample count");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  Waveform w;
  w.sample_rate_hz = sample_rate_hz;
  w.samples.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    unsigned char bytes[2];
    if (!in.read(reinterpret_cast<char*>(bytes), 2)) {
      throw ParseError(path, 1, "file holds fewer samples than the sidecar's " + std::to_string(count));
    }
    auto v = static_cast<std::int16_t>(static_cast<std::uint16_t>(bytes[0] | (bytes[1] << 8)));
    w.samples[i] = static_cast<double>(v) / 32768.0;
  }
  return w;
}

}  // namespace fedcpc::audio
