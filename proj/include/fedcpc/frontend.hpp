#pragma once

// Waveform -> 768-dim stacked STFT features.
//
// 25 ms Hann window, 10 ms shift, 512-point DFT, log(1e-10 + |X|) of bins
// 0..255; three consecutive frames are concatenated into one row.

#include <cstddef>
#include <string>
#include <vector>

#include "fedcpc/tensor.hpp"

namespace fedcpc::audio {

inline constexpr int kDefaultSampleRate = 16000;
inline constexpr std::size_t kFftSize = 512;
inline constexpr std::size_t kFrameBins = 256;
inline constexpr std::size_t kStack = 3;
inline constexpr std::size_t kFeatureDim = kFrameBins * kStack;  // 768
inline constexpr double kLogFloor = 1e-10;

struct Waveform {
  std::vector<double> samples;
  int sample_rate_hz = kDefaultSampleRate;

  void validate() const;  // finite samples, positive rate
};

struct FeatureSequence {
  ad::Tensor x;  // T x 768
  double frame_shift_s = 0.03;

  std::size_t frames() const { return x.rows(); }
};

/// Frame count for a signal: 1 + floor((len - window) / shift), 0 if too short.
std::size_t frame_count(std::size_t num_samples, std::size_t window, std::size_t shift);

/// T' x 256 log-magnitude frames. Throws TooShortError below one window.
ad::Tensor stft_frames(const Waveform& w, double window_ms = 25.0, double shift_ms = 10.0);

/// Non-overlapping groups of three frames -> floor(T'/3) rows of 768.
/// Throws TooShortError when T' < 3.
FeatureSequence stack3(const ad::Tensor& frames, double frame_shift_s = 0.01);

/// stft_frames followed by stack3.
FeatureSequence compute_features(const Waveform& w);

/// Headerless 16-bit little-endian mono PCM plus a "<path>.len" sidecar
/// holding the sample count. Samples are scaled to [-1, 1).
void write_pcm16(const std::string& path, const Waveform& w);
Waveform read_pcm16(const std::string& path, int sample_rate_hz = kDefaultSampleRate);

}  // namespace fedcpc::audio
