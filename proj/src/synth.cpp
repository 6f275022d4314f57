#include "fedcpc/synth.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>
#include <sstream>

#include "fedcpc/errors.hpp"
#include "fedcpc/util.hpp"

namespace fedcpc::audio {

namespace {

constexpr std::string_view kPrefix = "synth:v1";
constexpr double kOutputGain = 0.25;
constexpr double kSyllableMinMs = 250.0;
constexpr double kSyllableMaxMs = 450.0;
constexpr double kTuneSpread = 0.05;  // log-frequency jitter per syllable
constexpr double kMinBandAmp = 0.15;
constexpr double kFloorMin = 0.001;
constexpr double kFloorMax = 0.1;
constexpr int kSessionBands = 4;
constexpr double kBandGainMin = 0.01;
constexpr double kBandGainMax = 0.3;

std::size_t parse_field(const std::string& ref, std::string_view key, const std::string& text) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ParseError(ref, 1, "bad value for '" + std::string(key) + "'");
  }
  return v;
}

std::string speaker_name(std::size_t s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "spk%03zu", s);
  return buf;
}

}  // namespace

SpeakerSignature speaker_signature(std::uint64_t corpus_seed, std::size_t speaker) {
  Rng rng(derive_seed({corpus_seed, speaker, 0x5be4}));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SpeakerSignature sig{};
  sig.band_hz[0] = 300.0 + 600.0 * u(rng);
  sig.band_hz[1] = 1000.0 + 1200.0 * u(rng);
  sig.band_hz[2] = 2400.0 + 1400.0 * u(rng);
  for (double& g : sig.band_gain) g = 0.5 + 0.5 * u(rng);
  sig.syllable_ms = kSyllableMinMs + (kSyllableMaxMs - kSyllableMinMs) * u(rng);
  return sig;
}

std::string SynthSpec::to_audio_ref() const {
  std::ostringstream out;
  out << kPrefix << ":seed=" << corpus_seed << ":spk=" << speaker << ":ch=" << chapter << ":utt=" << utterance
      << ":n=" << num_samples;
  return out.str();
}

bool SynthSpec::is_synth_ref(const std::string& audio_ref) { return audio_ref.starts_with(kPrefix); }

SynthSpec SynthSpec::parse(const std::string& ref) {
  if (!is_synth_ref(ref)) throw ParseError(ref, 1, "not a synth reference");
  SynthSpec spec;
  int seen = 0;
  std::istringstream in(ref.substr(kPrefix.size()));
  std::string part;
  while (std::getline(in, part, ':')) {
    if (part.empty()) continue;
    auto eq = part.find('=');
    if (eq == std::string::npos) throw ParseError(ref, 1, "expected key=value, got '" + part + "'");
    std::string key = part.substr(0, eq);
    std::string value = part.substr(eq + 1);
    if (key == "seed") {
      std::uint64_t v = 0;
      auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
      if (ec != std::errc() || ptr != value.data() + value.size()) throw ParseError(ref, 1, "bad seed");
      spec.corpus_seed = v;
    } else if (key == "spk") {
      spec.speaker = parse_field(ref, key, value);
    } else if (key == "ch") {
      spec.chapter = parse_field(ref, key, value);
    } else if (key == "utt") {
      spec.utterance = parse_field(ref, key, value);
    } else if (key == "n") {
      spec.num_samples = parse_field(ref, key, value);
    } else {
      throw ParseError(ref, 1, "unknown key '" + key + "'");
    }
    ++seen;
  }
  if (seen != 5 || spec.num_samples == 0) throw ParseError(ref, 1, "incomplete synth reference");
  return spec;
}

Waveform synthesize(const SynthSpec& spec) {
  const SpeakerSignature sig = speaker_signature(spec.corpus_seed, spec.speaker);
  Rng rng(derive_seed({spec.corpus_seed, spec.speaker, spec.chapter, spec.utterance, 0x0717}));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> unit(0.0, 1.0);
  const double sr = kDefaultSampleRate;

  Waveform w;
  w.samples.resize(spec.num_samples);
  double phase[3] = {2 * std::numbers::pi * u(rng), 2 * std::numbers::pi * u(rng), 2 * std::numbers::pi * u(rng)};
  std::size_t pos = 0;
  while (pos < spec.num_samples) {
    auto len = static_cast<std::size_t>(sig.syllable_ms * (0.7 + 0.6 * u(rng)) * sr / 1000.0);
    len = std::max<std::size_t>(len, 1);
    double tune = std::exp(kTuneSpread * (2.0 * u(rng) - 1.0));
    double amp[3];
    for (double& a : amp) a = kMinBandAmp + (1.0 - kMinBandAmp) * u(rng);
    for (std::size_t i = 0; i < len && pos < spec.num_samples; ++i, ++pos) {
      double env = 0.3 + 0.7 * std::sin(std::numbers::pi * static_cast<double>(i) / static_cast<double>(len));
      double x = 0.0;
      for (int b = 0; b < 3; ++b) {
        phase[b] += 2.0 * std::numbers::pi * sig.band_hz[b] * tune / sr;
        x += sig.band_gain[b] * amp[b] * env * std::sin(phase[b]);
      }
      w.samples[pos] = kOutputGain * x;
    }
    for (double& p : phase) p = std::fmod(p, 2.0 * std::numbers::pi);
  }

  // Session background, fixed per chapter: a white floor plus resonant
  // bandpass noise bands. Only the noise parameters are shared; the noise
  // itself is drawn per utterance.
  Rng session(derive_seed({spec.corpus_seed, spec.speaker, spec.chapter, 0xc4a9}));
  const double floor_std = kFloorMin * std::pow(kFloorMax / kFloorMin, u(session));
  for (double& s : w.samples) s += floor_std * unit(rng);
  for (int r = 0; r < kSessionBands; ++r) {
    double fc = 150.0 * std::pow(7000.0 / 150.0, u(session));
    double q = 2.0 + 8.0 * u(session);
    double g = kBandGainMin * std::pow(kBandGainMax / kBandGainMin, u(session));
    double w0 = 2 * std::numbers::pi * fc / sr;
    double alpha = std::sin(w0) / (2 * q);
    double b0 = alpha, b2 = -alpha, a0 = 1 + alpha, a1 = -2 * std::cos(w0), a2 = 1 - alpha;
    double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
    for (double& s : w.samples) {
      double x = unit(rng);
      double y = (b0 * x + b2 * x2 - a1 * y1 - a2 * y2) / a0;
      x2 = x1;
      x1 = x;
      y2 = y1;
      y1 = y;
      s += g * y;
    }
  }
  return w;
}

SynthCorpus synth_corpus(std::size_t num_speakers, std::size_t chapters_per_speaker, std::size_t utts_per_chapter,
                         std::uint64_t seed, bool with_waveforms) {
  if (num_speakers < 1 || chapters_per_speaker < 1 || utts_per_chapter < 1) {
    throw ConfigError("synth_corpus: all counts must be >= 1");
  }
  SynthCorpus out;
  for (std::size_t s = 0; s < num_speakers; ++s) {
    for (std::size_t c = 0; c < chapters_per_speaker; ++c) {
      for (std::size_t u = 0; u < utts_per_chapter; ++u) {
        Rng len_rng(derive_seed({seed, s, c, u, 0x1e17}));
        std::uniform_int_distribution<std::size_t> len(kDefaultSampleRate, 3 * kDefaultSampleRate);
        SynthSpec spec{seed, s, c + 1, u + 1, len(len_rng)};
        char id[64];
        std::snprintf(id, sizeof id, "%s-%04zu-%04zu", speaker_name(s).c_str(), c + 1, u + 1);
        corpus::UtteranceRecord r;
        r.utterance_id = id;
        r.speaker_id = speaker_name(s);
        r.chapter_id = corpus::ChapterId{std::to_string(c + 1)};
        r.audio_ref = spec.to_audio_ref();
        r.duration_s = static_cast<double>(spec.num_samples) / kDefaultSampleRate;
        out.records.push_back(std::move(r));
        out.speaker_labels.push_back(s);
        if (with_waveforms) out.waveforms.push_back(synthesize(spec));
      }
    }
  }
  return out;
}

Waveform load_audio(const corpus::UtteranceRecord& record, const std::string& base_dir) {
  if (SynthSpec::is_synth_ref(record.audio_ref)) return synthesize(SynthSpec::parse(record.audio_ref));
  std::filesystem::path p(record.audio_ref);
  if (p.is_relative() && !base_dir.empty()) p = std::filesystem::path(base_dir) / p;
  return read_pcm16(p.string());
}

FeatureSequence load_features(const corpus::UtteranceRecord& record, const std::string& base_dir) {
  return compute_features(load_audio(record, base_dir));
}

}  // namespace fedcpc::audio
