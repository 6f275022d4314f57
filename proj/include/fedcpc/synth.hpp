#pragma once

// Synthetic multi-speaker corpus.
//
// Every speaker owns a persistent spectral signature: three sinusoid bands
// at speaker-specific centre frequencies. An utterance is a run of short
// "syllables", each re-tuning and re-weighting those bands, over background
// noise whose colour is fixed per chapter (a recording session).
// Utterances are regenerated on demand from the generator spec in
// audio_ref, so a corpus needs no audio files.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "fedcpc/corpus.hpp"
#include "fedcpc/frontend.hpp"

namespace fedcpc::audio {

struct SpeakerSignature {
  double band_hz[3];
  double band_gain[3];
  double syllable_ms;  // mean syllable length
};

SpeakerSignature speaker_signature(std::uint64_t corpus_seed, std::size_t speaker);

struct SynthSpec {
  std::uint64_t corpus_seed = 0;
  std::size_t speaker = 0;
  std::size_t chapter = 0;
  std::size_t utterance = 0;
  std::size_t num_samples = 0;

  std::string to_audio_ref() const;
  static bool is_synth_ref(const std::string& audio_ref);
  /// Throws ParseError on a malformed reference.
  static SynthSpec parse(const std::string& audio_ref);
};

Waveform synthesize(const SynthSpec& spec);

struct SynthCorpus {
  std::vector<corpus::UtteranceRecord> records;
  std::vector<std::size_t> speaker_labels;  // parallel to records
  std::vector<Waveform> waveforms;          // empty unless requested
};

/// num_speakers x chapters_per_speaker x utts_per_chapter utterances of 1-3 s.
SynthCorpus synth_corpus(std::size_t num_speakers, std::size_t chapters_per_speaker, std::size_t utts_per_chapter,
                         std::uint64_t seed, bool with_waveforms = false);

/// Synthesizes generator references; otherwise reads a PCM file, resolving
/// relative paths against base_dir.
Waveform load_audio(const corpus::UtteranceRecord& record, const std::string& base_dir = "");

FeatureSequence load_features(const corpus::UtteranceRecord& record, const std::string& base_dir = "");

}  // namespace fedcpc::audio
