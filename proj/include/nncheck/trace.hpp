// SPDX-License-Identifier: Apache-2.0
//
// Line-delimited JSON trace files: one header line, then one record per
// training step. See docs/trace-format.md.

#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "nncheck/session.hpp"
#include "nncheck/telemetry.hpp"

namespace nncheck {

/// I/O or validation failure while reading or writing a trace.
class TraceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string header_line(const TraceHeader& h) { return to_json(h).dump() + "\n"; }
inline std::string record_line(const TraceRecord& r) { return to_json(r).dump() + "\n"; }

/// Writes a trace, flushing after every line so a crashed run leaves a
/// readable prefix. In summary mode full payloads are reduced to summaries.
class TraceWriter : public RecordSink {
 public:
  TraceWriter(const std::string& path, PayloadMode mode) : path_(path), mode_(mode), out_(path) {
    if (!out_) throw TraceError("cannot open trace file for writing: " + path);
  }

  void begin(const TraceHeader& header) override {
    if (begun_) throw UsageError("trace header already written");
    TraceHeader h = header;
    h.payload = mode_;
    put(header_line(h));
    begun_ = true;
  }

  void write(const TraceRecord& record) override {
    if (!begun_) throw UsageError("trace header must be written first");
    put(record_line(mode_ == PayloadMode::summary ? to_summary(record) : record));
    ++records_;
  }

  std::size_t records() const noexcept { return records_; }

 private:
  void put(const std::string& line) {
    out_ << line;
    out_.flush();
    if (!out_) {
      throw TraceError("write to " + path_ + " failed after " + std::to_string(records_) +
                       " records; the file holds a partial trace");
    }
  }

  std::string path_;
  PayloadMode mode_;
  std::ofstream out_;
  bool begun_ = false;
  std::size_t records_ = 0;
};

/// Streaming reader with validation. A final line cut off mid-record is
/// dropped with a warning; any other malformed line is an error naming its
/// line number.
class TraceReader {
 public:
  explicit TraceReader(const std::string& path) : path_(path), in_(path) {
    if (!in_) throw TraceError("cannot open trace file: " + path);
    std::string line;
    if (!std::getline(in_, line)) throw TraceError(path + ": empty trace file");
    line_no_ = 1;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw TraceError(where() + "malformed header: " + e.what());
    }
    if (!j.is_object() || j.value("format", "") != "nncheck-trace") {
      throw TraceError(where() + "not an nncheck trace header");
    }
    if (!j.contains("version") || !j.at("version").is_number_integer()) {
      throw TraceError(where() + "header lacks a version");
    }
    const int version = j.at("version").get<int>();
    if (version != kTraceVersion) {
      throw TraceError(where() + "unsupported trace version " + std::to_string(version) +
                       " (reader supports " + std::to_string(kTraceVersion) + ")");
    }
    try {
      header_ = header_from_json(j);
    } catch (const std::exception& e) {
      throw TraceError(where() + "malformed header: " + e.what());
    }
  }

  const TraceHeader& header() const noexcept { return header_; }
  const std::vector<std::string>& warnings() const noexcept { return warnings_; }

  std::optional<TraceRecord> next() {
    std::string line;
    if (done_ || !std::getline(in_, line)) {
      done_ = true;
      return std::nullopt;
    }
    ++line_no_;
    const bool unterminated = in_.eof();
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      if (unterminated) {
        warnings_.push_back(where() + "truncated final record ignored");
        done_ = true;
        return std::nullopt;
      }
      throw TraceError(where() + "corrupt record: " + e.what());
    }
    TraceRecord rec;
    try {
      rec = record_from_json(j);
    } catch (const std::exception& e) {
      throw TraceError(where() + "corrupt record: " + e.what());
    }
    validate(rec);
    return rec;
  }

  std::vector<TraceRecord> read_all() {
    std::vector<TraceRecord> out;
    while (auto r = next()) out.push_back(std::move(*r));
    return out;
  }

 private:
  std::string where() const { return path_ + ":" + std::to_string(line_no_) + ": "; }

  void validate(const TraceRecord& rec) {
    if (last_step_ && rec.step <= *last_step_) {
      throw TraceError(where() + "step " + std::to_string(rec.step) +
                       " does not increase on previous step " + std::to_string(*last_step_));
    }
    last_step_ = rec.step;
    std::set<std::string> names;
    for (const auto& t : rec.tensors) {
      if (!names.insert(t.name).second) throw TraceError(where() + "duplicate tensor name " + t.name);
      if (t.layer >= header_.layers.size()) {
        throw TraceError(where() + t.name + " refers to a layer the header does not declare");
      }
      const bool full = header_.payload == PayloadMode::full;
      if (t.is_full() != full) {
        throw TraceError(where() + t.name + " payload does not match the trace payload mode " +
                         std::string(to_string(header_.payload)));
      }
    }
  }

  std::string path_;
  std::ifstream in_;
  TraceHeader header_;
  std::size_t line_no_ = 0;
  std::optional<std::int64_t> last_step_;
  std::vector<std::string> warnings_;
  bool done_ = false;
};

/// Replay a trace through the same routines as live monitoring.
inline SessionReport analyze_trace(const std::string& path, const CheckConfig& cfg,
                                   const std::vector<HookSpec>& hooks, const ReactionPolicy& policy,
                                   std::vector<std::string>* warnings = nullptr) {
  TraceReader reader(path);
  Monitor monitor(reader.header().layers, cfg, hooks, policy);
  while (auto rec = reader.next()) {
    if (monitor.observe(*rec)) break;
  }
  if (warnings != nullptr) *warnings = reader.warnings();
  return monitor.report(reader.header().seed, reader.header().model_digest);
}

}  // namespace nncheck
