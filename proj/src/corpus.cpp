#include "fedcpc/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <unordered_set>

#include "fedcpc/errors.hpp"

namespace fedcpc::corpus {

namespace {

std::optional<long long> as_integer(const std::string& s) {
  if (s.empty()) return std::nullopt;
  long long v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    std::size_t tab = line.find('\t', start);
    fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return fields;
}

bool silo_order(const UtteranceRecord& a, const UtteranceRecord& b) {
  if (auto c = a.chapter_id <=> b.chapter_id; c != 0) return c < 0;
  return a.utterance_id < b.utterance_id;
}

}  // namespace

std::strong_ordering ChapterId::operator<=>(const ChapterId& other) const {
  auto a = as_integer(text);
  auto b = as_integer(other.text);
  if (a && b) {
    if (auto c = *a <=> *b; c != 0) return c;
    return text <=> other.text;  // "07" vs "7"
  }
  if (a) return std::strong_ordering::less;
  if (b) return std::strong_ordering::greater;
  return text <=> other.text;
}

std::optional<LibriLightId> parse_librilight_id(const std::string& id) {
  std::size_t first = id.find('-');
  if (first == std::string::npos || first == 0) return std::nullopt;
  std::size_t second = id.find('-', first + 1);
  if (second == std::string::npos || second == first + 1 || second + 1 >= id.size()) return std::nullopt;
  if (id.find('-', second + 1) != std::string::npos) return std::nullopt;
  return LibriLightId{id.substr(0, first), id.substr(first + 1, second - first - 1), id.substr(second + 1)};
}

std::vector<UtteranceRecord> parse_manifest(std::istream& in, const std::string& source) {
  std::vector<UtteranceRecord> records;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    auto fields = split_tabs(line);
    if (fields.size() != 5) {
      throw ParseError(source, line_no, "expected 5 tab-separated fields, got " + std::to_string(fields.size()));
    }
    UtteranceRecord r;
    r.utterance_id = fields[0];
    r.speaker_id = fields[1];
    r.chapter_id = ChapterId{fields[2]};
    r.audio_ref = fields[3];
    if (r.utterance_id.empty()) throw ParseError(source, line_no, "empty utterance_id");
    if (r.speaker_id.empty() || r.chapter_id.text.empty()) {
      auto parsed = parse_librilight_id(r.utterance_id);
      if (!parsed) {
        throw ParseError(source, line_no,
                         "speaker/chapter missing and id '" + r.utterance_id + "' is not speaker-chapter-seq");
      }
      if (r.speaker_id.empty()) r.speaker_id = parsed->speaker;
      if (r.chapter_id.text.empty()) r.chapter_id.text = parsed->chapter;
    }
    const std::string& dur = fields[4];
    double d = 0.0;
    auto [ptr, ec] = std::from_chars(dur.data(), dur.data() + dur.size(), d);
    if (ec != std::errc() || ptr != dur.data() + dur.size()) {
      throw ParseError(source, line_no, "bad duration '" + dur + "'");
    }
    if (!(d > 0.0) || !std::isfinite(d)) throw ParseError(source, line_no, "duration must be positive");
    r.duration_s = d;
    if (!seen.insert(r.utterance_id).second) throw DuplicateIdError(r.utterance_id);
    records.push_back(std::move(r));
  }
  return records;
}

std::vector<UtteranceRecord> load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path);
  return parse_manifest(in, path);
}

void write_manifest(std::ostream& out, const std::vector<UtteranceRecord>& records) {
  out << "# utterance_id\tspeaker_id\tchapter_id\taudio_ref\tduration_s\n";
  for (const auto& r : records) {
    out << r.utterance_id << '\t' << r.speaker_id << '\t' << r.chapter_id.text << '\t' << r.audio_ref << '\t'
        << format_double(r.duration_s) << '\n';
  }
}

void save_manifest(const std::string& path, const std::vector<UtteranceRecord>& records) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest " + path);
  write_manifest(out, records);
}

std::vector<SpeakerSilo> partition_by_speaker(const std::vector<UtteranceRecord>& records) {
  std::map<std::string, std::vector<UtteranceRecord>> by_speaker;
  for (const auto& r : records) by_speaker[r.speaker_id].push_back(r);
  std::vector<SpeakerSilo> silos;
  silos.reserve(by_speaker.size());
  for (auto& [speaker, utts] : by_speaker) {
    std::sort(utts.begin(), utts.end(), silo_order);
    silos.push_back(SpeakerSilo{speaker, std::move(utts)});
  }
  return silos;
}

ClientStream::ClientStream(std::size_t client_index, std::vector<Batch> batches)
    : client_index_(client_index), batches_(std::move(batches)) {}

std::optional<Batch> ClientStream::next_batch() {
  if (exhausted()) return std::nullopt;
  return batches_[cursor_++];
}

std::vector<ClientStream> assign_to_clients(const std::vector<SpeakerSilo>& silos, std::size_t num_clients,
                                            std::size_t max_batch, Rng& rng) {
  if (num_clients < 1) throw ConfigError("assign_to_clients: num_clients must be >= 1");
  if (max_batch < 1) throw ConfigError("assign_to_clients: max_batch must be >= 1");
  if (num_clients > silos.size()) {
    log_warning(std::to_string(num_clients) + " clients but only " + std::to_string(silos.size()) +
                " speaker silos; " + std::to_string(num_clients - silos.size()) + " clients stay idle");
  }
  std::vector<std::size_t> order(silos.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::vector<Batch>> per_client(num_clients);
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    const auto& utts = silos[order[pos]].utterances;
    auto& batches = per_client[pos % num_clients];
    for (std::size_t start = 0; start < utts.size(); start += max_batch) {
      std::size_t end = std::min(start + max_batch, utts.size());
      batches.emplace_back(utts.begin() + static_cast<std::ptrdiff_t>(start),
                           utts.begin() + static_cast<std::ptrdiff_t>(end));
    }
  }
  std::vector<ClientStream> streams;
  streams.reserve(num_clients);
  for (std::size_t c = 0; c < num_clients; ++c) streams.emplace_back(c, std::move(per_client[c]));
  return streams;
}

std::vector<SpeakerSummary> summarize_silos(const std::vector<SpeakerSilo>& silos) {
  std::vector<SpeakerSummary> out;
  for (const auto& silo : silos) {
    SpeakerSummary s;
    s.speaker_id = silo.speaker_id;
    s.utterances = silo.utterances.size();
    std::set<std::string> chapters;
    for (const auto& u : silo.utterances) {
      chapters.insert(u.chapter_id.text);
      s.duration_s += u.duration_s;
    }
    s.chapters = chapters.size();
    out.push_back(std::move(s));
  }
  return out;
}

void write_silo_report(std::ostream& out, const std::vector<SpeakerSummary>& summary) {
  out << "speaker_id\tutterances\tchapters\tduration_s\n";
  std::size_t utts = 0;
  std::size_t chapters = 0;
  double duration = 0.0;
  for (const auto& s : summary) {
    out << s.speaker_id << '\t' << s.utterances << '\t' << s.chapters << '\t' << format_double(s.duration_s) << '\n';
    utts += s.utterances;
    chapters += s.chapters;
    duration += s.duration_s;
  }
  out << "TOTAL\t" << utts << '\t' << chapters << '\t' << format_double(duration) << '\n';
}

}  // namespace fedcpc::corpus
