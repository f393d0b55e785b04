#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "kmax/config.hpp"
#include "kmax/inference.hpp"
#include "kmax/model.hpp"

namespace kmax {

struct StepRecord {
  std::size_t step = 0;  // 1-based count of completed updates
  double loss = 0.0;
  double l_pq = 0.0;
  double l_sem = 0.0;
  double l_maskid = 0.0;
  double grad_norm = 0.0;  // before clipping
  bool has_val = false;
  double val_pq = 0.0;
};

struct TrainOptions {
  // When set: metrics.csv, model.ckpt and config.txt are written here.
  std::string out_dir;
  std::ostream* progress = nullptr;
};

struct TrainResult {
  KMaxModel model;
  // One record per step; the CSV keeps every log_every-th row.
  std::vector<StepRecord> trace;
  EvalReport final_eval;
};

// Validates `config` before any compute. Deterministic for a fixed config.
TrainResult train_loop(const Config& config, const TrainOptions& options = {});

inline constexpr const char* kMetricsHeader = "step,loss,l_pq,l_sem,l_maskid,val_pq";

// Rows for every log_every-th step, evaluated steps and the last step.
std::string format_metrics_csv(const std::vector<StepRecord>& trace, std::size_t log_every);

}  // namespace kmax
