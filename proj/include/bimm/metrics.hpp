#pragma once

#include <fstream>
#include <string>

#include "json.hpp"

#include "bimm/errors.hpp"
#include "bimm/train.hpp"

namespace bimm {

// ---------------------------------------------------------------------------
// JSON-lines metrics stream: one object per training step or fit epoch.
// Keys are emitted in sorted order and doubles use shortest round-trip
// formatting, so identical runs produce byte-identical files. wall_ms is
// only present when the caller opted into wall-clock logging.
// ---------------------------------------------------------------------------

inline nlohmann::json step_record_json(const StepReport& r) {
  nlohmann::json j{{"step", r.step},     {"lr", r.lr},           {"loss", r.loss},
                   {"loss_v", r.loss_v}, {"loss_d", r.loss_d},   {"taps_v", r.taps_v},
                   {"taps_d", r.taps_d}};
  if (r.wall_ms >= 0.0) j["wall_ms"] = r.wall_ms;
  return j;
}

inline nlohmann::json epoch_record_json(const FitReport& r) {
  nlohmann::json j{{"epoch", r.epoch}, {"lr", r.lr}, {"loss", r.loss},
                   {"train_acc", r.train_acc}};
  if (r.eval_acc >= 0.0) j["eval_acc"] = r.eval_acc;
  return j;
}

class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path) : os_(path, std::ios::binary) {
    if (!os_) throw DataError("cannot open metrics file for writing: " + path);
  }

  void write(const nlohmann::json& record) {
    os_ << record.dump() << '\n';
    if (!os_) throw DataError("write to metrics file failed");
  }

  void write_step(const StepReport& r) {
    long long step = static_cast<long long>(r.step);
    if (step <= last_step_) {
      throw ContractError("metrics: step " + std::to_string(r.step) +
                          " does not advance past " + std::to_string(last_step_));
    }
    last_step_ = step;
    write(step_record_json(r));
  }

  void write_epoch(const FitReport& r) {
    long long epoch = static_cast<long long>(r.epoch);
    if (epoch <= last_epoch_) {
      throw ContractError("metrics: epoch " + std::to_string(r.epoch) +
                          " does not advance past " + std::to_string(last_epoch_));
    }
    last_epoch_ = epoch;
    write(epoch_record_json(r));
  }

 private:
  std::ofstream os_;
  long long last_step_ = -1;
  long long last_epoch_ = -1;
};

// Reads a metrics file back as parsed records, for tooling and tests.
inline std::vector<nlohmann::json> read_metrics(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open metrics file: " + path);
  std::vector<nlohmann::json> records;
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      records.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("metrics line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return records;
}

}  // namespace bimm
