#include "kmax/train.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <numeric>
#include <ostream>

#include "kmax/loss.hpp"
#include "kmax/ops.hpp"
#include "kmax/optimizer.hpp"

namespace kmax {

namespace {

// Cycles through [0, size) in a fresh seeded permutation per epoch.
class IndexStream {
 public:
  IndexStream(std::size_t size, std::uint64_t seed) : order_(size), rng_(seed) { reshuffle(); }

  std::size_t next() {
    if (pos_ == order_.size()) reshuffle();
    return order_[pos_++];
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
  }

  std::vector<std::size_t> order_;
  std::mt19937_64 rng_;
  std::size_t pos_ = 0;
};

std::vector<Sample> generate_batch(const SceneSpec& spec, std::vector<std::size_t> indices) {
  std::vector<Sample> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(generate(spec, i));
  return out;
}

}  // namespace

TrainResult train_loop(const Config& config, const TrainOptions& options) {
  config.validate();
  const TrainConfig& tc = config.train;
  const SceneSpec train_spec = SceneSpec::from_config(config.data, config.data.seed);
  const SceneSpec val_spec = SceneSpec::from_config(config.data, config.data.val_seed);
  train_spec.validate();

  TrainResult result{KMaxModel(config.model, tc.seed), {}, {}};
  KMaxModel& model = result.model;
  AdamW optimizer(model.parameters(),
                  {tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay});
  const LossWeights weights = LossWeights::from_config(tc);
  const MergeOptions merge = MergeOptions::from_config(config.infer);

  IndexStream indices(tc.train_size, tc.seed * 0x9E3779B97F4A7C15ULL + 1);
  std::mt19937_64 rng(tc.seed * 0xD1B54A32D192ED03ULL + 2);

  auto next_indices = [&] {
    std::vector<std::size_t> idx(tc.batch_size);
    for (auto& i : idx) i = indices.next();
    return idx;
  };
  const bool prefetch = config.data.threads > 1;
  std::future<std::vector<Sample>> pending;
  if (prefetch) pending = std::async(std::launch::async, generate_batch, train_spec, next_indices());

  for (std::size_t step = 0; step < tc.steps; ++step) {
    std::vector<Sample> batch;
    if (prefetch) {
      batch = pending.get();
      if (step + 1 < tc.steps) {
        pending = std::async(std::launch::async, generate_batch, train_spec, next_indices());
      }
    } else {
      batch = generate_batch(train_spec, next_indices());
    }

    model.parameters().zero_grad();
    StepRecord rec;
    rec.step = step + 1;
    const double inv_batch = 1.0 / static_cast<double>(batch.size());
    for (Sample& sample : batch) {
      if (tc.flip) sample = augment_flip(sample, rng);
      const ModelOutput out = model_forward(model, sample.image, true, &rng);
      const std::size_t factor = sample.gt.height / out.mask_height;
      const SegmentTargets targets = SegmentTargets::from_map(downsample(sample.gt, factor));
      Matching matching;
      {
        NoGradGuard no_grad;
        matching = match_prediction(to_prediction_set(out.final), targets);
      }
      const LossTerms terms =
          total_loss(out.final, out.aux, out.semantic_logits, targets, matching, weights);
      scale(terms.total, inv_batch).backward();
      rec.loss += terms.total.item() * inv_batch;
      rec.l_pq += terms.l_pq * inv_batch;
      rec.l_sem += terms.l_sem * inv_batch;
      rec.l_maskid += terms.l_maskid * inv_batch;
    }
    rec.grad_norm = global_grad_norm(model.parameters());
    optimizer.step(scheduled_lr(step, tc.steps, tc.warmup_fraction, tc.lr),
                   clip_scale(rec.grad_norm, tc.grad_clip));

    const bool last = step + 1 == tc.steps;
    if (last || (tc.val_every > 0 && rec.step % tc.val_every == 0)) {
      const EvalReport report = evaluate(model, val_spec, config.data.val_size, merge, 1);
      rec.has_val = true;
      rec.val_pq = report.quality.pq;
      if (last) result.final_eval = report;
    }
    if (options.progress && (rec.step % tc.log_every == 0 || rec.has_val)) {
      char buf[160];
      std::snprintf(buf, sizeof(buf), "step %5zu  loss %.4f  pq %.4f  sem %.4f  maskid %.4f  gnorm %.3g",
                    rec.step, rec.loss, rec.l_pq, rec.l_sem, rec.l_maskid, rec.grad_norm);
      *options.progress << buf;
      if (rec.has_val) *options.progress << "  val_pq " << rec.val_pq;
      *options.progress << std::endl;
    }
    result.trace.push_back(rec);
  }

  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    const std::filesystem::path dir(options.out_dir);
    std::ofstream csv(dir / "metrics.csv");
    if (!csv) throw IoError("cannot write " + (dir / "metrics.csv").string());
    csv << format_metrics_csv(result.trace, tc.log_every);
    config.save((dir / "config.txt").string());
    save_checkpoint((dir / "model.ckpt").string(), config, model);
  }
  return result;
}

std::string format_metrics_csv(const std::vector<StepRecord>& trace, std::size_t log_every) {
  std::string out = std::string(kMetricsHeader) + "\n";
  char buf[256];
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const StepRecord& r = trace[i];
    const bool keep = r.has_val || i + 1 == trace.size() || (log_every && r.step % log_every == 0);
    if (!keep) continue;
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g,", r.step, r.loss, r.l_pq, r.l_sem,
                  r.l_maskid);
    out += buf;
    if (r.has_val) {
      std::snprintf(buf, sizeof(buf), "%.17g", r.val_pq);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

}  // namespace kmax
