#pragma once

// Speaker-siloed client data.
//
// Records are grouped per speaker, each silo is ordered by chapter (a proxy
// for time), silos are dealt to clients, and every client streams its silos
// as speaker-pure batches exactly once.

#include <compare>
#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "fedcpc/util.hpp"

namespace fedcpc::corpus {

/// Chapter label. Compares numerically when both sides are integers,
/// lexicographically otherwise (integers sort first).
struct ChapterId {
  std::string text;

  std::strong_ordering operator<=>(const ChapterId& other) const;
  bool operator==(const ChapterId& other) const { return text == other.text; }
};

struct UtteranceRecord {
  std::string utterance_id;
  std::string speaker_id;
  ChapterId chapter_id;
  std::string audio_ref;
  double duration_s = 0.0;

  bool operator==(const UtteranceRecord&) const = default;
};

struct LibriLightId {
  std::string speaker;
  std::string chapter;
  std::string sequence;
};

/// Splits "speaker-chapter-seq"; nullopt if the id does not have that form.
std::optional<LibriLightId> parse_librilight_id(const std::string& utterance_id);

/// Tab-separated manifest: utterance_id, speaker_id, chapter_id, audio_ref,
/// duration_s. '#' lines and blank lines are skipped. Empty speaker or
/// chapter fields are filled from a Libri-Light style utterance id.
/// Throws ParseError (with line number) or DuplicateIdError.
std::vector<UtteranceRecord> parse_manifest(std::istream& in, const std::string& source = "manifest");
std::vector<UtteranceRecord> load_manifest(const std::string& path);

void write_manifest(std::ostream& out, const std::vector<UtteranceRecord>& records);
void save_manifest(const std::string& path, const std::vector<UtteranceRecord>& records);

struct SpeakerSilo {
  std::string speaker_id;
  std::vector<UtteranceRecord> utterances;  // chapter order, then utterance_id
};

/// One silo per speaker, silos in ascending speaker_id order.
std::vector<SpeakerSilo> partition_by_speaker(const std::vector<UtteranceRecord>& records);

using Batch = std::vector<UtteranceRecord>;

/// A client's single-pass queue of speaker-pure batches.
class ClientStream {
 public:
  ClientStream() = default;
  ClientStream(std::size_t client_index, std::vector<Batch> batches);

  std::size_t client_index() const noexcept { return client_index_; }
  std::size_t cursor() const noexcept { return cursor_; }
  std::size_t batch_count() const noexcept { return batches_.size(); }
  std::size_t remaining() const noexcept { return batches_.size() - cursor_; }
  bool exhausted() const noexcept { return cursor_ >= batches_.size(); }
  const std::vector<Batch>& batches() const noexcept { return batches_; }

  /// Next unseen batch, or nullopt once drained.
  std::optional<Batch> next_batch();

 private:
  std::size_t client_index_ = 0;
  std::vector<Batch> batches_;
  std::size_t cursor_ = 0;
};

inline std::optional<Batch> next_batch(ClientStream& stream) { return stream.next_batch(); }

/// Shuffles silo order with `rng`, deals silos round-robin to clients, and
/// cuts each silo into consecutive batches of at most max_batch.
/// More clients than silos leaves some clients idle (warning).
std::vector<ClientStream> assign_to_clients(const std::vector<SpeakerSilo>& silos, std::size_t num_clients,
                                            std::size_t max_batch, Rng& rng);

struct SpeakerSummary {
  std::string speaker_id;
  std::size_t utterances = 0;
  std::size_t chapters = 0;
  double duration_s = 0.0;
};

std::vector<SpeakerSummary> summarize_silos(const std::vector<SpeakerSilo>& silos);

/// Tab-separated: header, one row per speaker, then a TOTAL row.
void write_silo_report(std::ostream& out, const std::vector<SpeakerSummary>& summary);

}  // namespace fedcpc::corpus
