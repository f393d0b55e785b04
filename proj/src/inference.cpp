#include "kmax/inference.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <thread>

#include "kmax/ops.hpp"

namespace kmax {

MergeOptions MergeOptions::from_config(const InferConfig& infer) {
  return {infer.conf_thresh, infer.overlap_thresh, infer.mask_thresh};
}

PanopticResult merge_masks(const PredictionSet& pred, const ClassTable& classes,
                           const MergeOptions& options) {
  const std::size_t h = pred.height, w = pred.width, hw = h * w;
  PanopticResult result{PanopticMap::filled(h, w), {}};
  if (!pred.masks.defined() || !pred.classes.defined()) return result;
  if (pred.masks.dim(0) != hw) {
    throw ShapeError("merge_masks: " + std::to_string(pred.masks.dim(0)) + " mask rows for a " +
                     std::to_string(h) + "x" + std::to_string(w) + " image");
  }
  const std::size_t n = pred.num_queries();
  const std::size_t k = pred.num_classes();
  if (k != classes.size()) {
    throw ShapeError("merge_masks: " + std::to_string(k) + " predicted classes vs " +
                     std::to_string(classes.size()) + " in the class table");
  }
  const auto z = pred.masks.data();
  const auto p = pred.classes.data();

  std::vector<double> conf(n, 0.0);
  std::vector<int> label(n, 0);
  std::vector<bool> active(n, false);
  std::vector<std::size_t> binary(n, 0);
  for (std::size_t q = 0; q < n; ++q) {
    for (std::size_t c = 0; c < k; ++c) {
      if (p[q * (k + 1) + c] > conf[q]) {
        conf[q] = p[q * (k + 1) + c];
        label[q] = static_cast<int>(c);
      }
    }
    active[q] = conf[q] >= options.conf_thresh;
  }
  for (std::size_t px = 0; px < hw; ++px)
    for (std::size_t q = 0; q < n; ++q) binary[q] += z[px * n + q] > options.mask_thresh;

  std::vector<int> owner(hw, -1);
  std::vector<std::size_t> kept(n);
  while (true) {
    std::fill(kept.begin(), kept.end(), 0);
    for (std::size_t px = 0; px < hw; ++px) {
      int best = -1;
      double best_score = -1.0;
      for (std::size_t q = 0; q < n; ++q) {
        if (!active[q]) continue;
        const double s = conf[q] * z[px * n + q];
        if (s > best_score) {
          best_score = s;
          best = static_cast<int>(q);
        }
      }
      owner[px] = best;
      if (best >= 0 && z[px * n + static_cast<std::size_t>(best)] > options.mask_thresh) {
        ++kept[static_cast<std::size_t>(best)];
      }
    }
    int worst = -1;
    double worst_frac = std::numeric_limits<double>::infinity();
    for (std::size_t q = 0; q < n; ++q) {
      if (!active[q]) continue;
      const double frac =
          binary[q] == 0 ? 0.0 : static_cast<double>(kept[q]) / static_cast<double>(binary[q]);
      if (frac < worst_frac) {
        worst_frac = frac;
        worst = static_cast<int>(q);
      }
    }
    if (worst < 0 || worst_frac >= options.overlap_thresh) break;
    active[static_cast<std::size_t>(worst)] = false;
  }

  std::vector<int> instance(n, 0);
  int next_instance = 1;
  std::vector<std::size_t> area(n, 0);
  for (int o : owner)
    if (o >= 0) ++area[static_cast<std::size_t>(o)];
  for (std::size_t q = 0; q < n; ++q) {
    if (area[q] > 0 && classes[static_cast<std::size_t>(label[q])].is_thing) {
      instance[q] = next_instance++;
    }
  }
  std::map<std::pair<int, int>, double> confidence;
  for (std::size_t px = 0; px < hw; ++px) {
    if (owner[px] < 0) continue;
    const auto q = static_cast<std::size_t>(owner[px]);
    result.map.class_ids[px] = label[q];
    result.map.instance_ids[px] = instance[q];
    double& c = confidence[{label[q], instance[q]}];
    c = std::max(c, conf[q]);
  }
  result.segments = result.map.segments();
  for (auto& s : result.segments) s.confidence = confidence[{s.class_id, s.instance_id}];
  return result;
}

double ClassQuality::pq() const {
  const double denom = static_cast<double>(tp) + 0.5 * static_cast<double>(fp + fn);
  return denom > 0 ? iou_sum / denom : 0.0;
}

double ClassQuality::sq() const { return tp > 0 ? iou_sum / static_cast<double>(tp) : 0.0; }

double ClassQuality::rq() const {
  const double denom = static_cast<double>(tp) + 0.5 * static_cast<double>(fp + fn);
  return denom > 0 ? static_cast<double>(tp) / denom : 0.0;
}

PanopticQualityAccumulator::PanopticQualityAccumulator(ClassTable classes)
    : classes_(std::move(classes)) {
  for (std::size_t c = 0; c < classes_.size(); ++c) {
    ClassQuality q;
    q.class_id = static_cast<int>(c);
    q.name = classes_[c].name;
    q.is_thing = classes_[c].is_thing;
    stats_.push_back(q);
  }
}

void PanopticQualityAccumulator::add(const PanopticMap& pred, const PanopticMap& gt) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw ShapeError("panoptic_quality: prediction " + std::to_string(pred.height) + "x" +
                     std::to_string(pred.width) + " vs ground truth " + std::to_string(gt.height) +
                     "x" + std::to_string(gt.width));
  }
  const auto gsegs = gt.segments();
  const auto psegs = pred.segments();
  const auto gidx = gt.segment_index(gsegs);
  const auto pidx = pred.segment_index(psegs);
  for (const auto* segs : {&gsegs, &psegs}) {
    for (const auto& s : *segs) {
      if (s.class_id < 0 || static_cast<std::size_t>(s.class_id) >= classes_.size()) {
        throw ArgumentError("panoptic_quality: class id " + std::to_string(s.class_id) +
                            " not in the class table");
      }
    }
  }

  std::map<std::pair<int, int>, std::size_t> inter;
  std::vector<std::size_t> pred_in_void(psegs.size(), 0);
  for (std::size_t px = 0; px < gidx.size(); ++px) {
    if (pidx[px] < 0) continue;
    if (gidx[px] < 0) {
      ++pred_in_void[static_cast<std::size_t>(pidx[px])];
    } else {
      ++inter[{gidx[px], pidx[px]}];
    }
  }
  std::vector<bool> gt_matched(gsegs.size(), false), pred_matched(psegs.size(), false);
  for (const auto& [key, count] : inter) {
    const auto g = static_cast<std::size_t>(key.first);
    const auto s = static_cast<std::size_t>(key.second);
    if (gsegs[g].class_id != psegs[s].class_id) continue;
    const double uni =
        static_cast<double>(gsegs[g].area + psegs[s].area - count - pred_in_void[s]);
    const double iou = static_cast<double>(count) / uni;
    if (iou > 0.5) {
      auto& st = stats_[static_cast<std::size_t>(gsegs[g].class_id)];
      ++st.tp;
      st.iou_sum += iou;
      gt_matched[g] = pred_matched[s] = true;
    }
  }
  for (std::size_t g = 0; g < gsegs.size(); ++g) {
    if (!gt_matched[g]) ++stats_[static_cast<std::size_t>(gsegs[g].class_id)].fn;
  }
  for (std::size_t s = 0; s < psegs.size(); ++s) {
    if (pred_matched[s]) continue;
    if (static_cast<double>(pred_in_void[s]) > 0.5 * static_cast<double>(psegs[s].area)) continue;
    ++stats_[static_cast<std::size_t>(psegs[s].class_id)].fp;
  }
}

QualityReport PanopticQualityAccumulator::report() const {
  QualityReport r;
  r.per_class = stats_;
  double all = 0, th = 0, st = 0, sq = 0, rq = 0;
  std::size_t n_all = 0, n_th = 0, n_st = 0;
  for (const auto& c : stats_) {
    if (!c.present()) continue;
    all += c.pq();
    sq += c.sq();
    rq += c.rq();
    ++n_all;
    if (c.is_thing) {
      th += c.pq();
      ++n_th;
    } else {
      st += c.pq();
      ++n_st;
    }
  }
  auto avg = [](double s, std::size_t n) { return n ? s / static_cast<double>(n) : 0.0; };
  r.pq = avg(all, n_all);
  r.sq = avg(sq, n_all);
  r.rq = avg(rq, n_all);
  r.pq_th = avg(th, n_th);
  r.pq_st = avg(st, n_st);
  return r;
}

QualityReport panoptic_quality(const PanopticResult& pred, const PanopticMap& gt,
                               const ClassTable& classes) {
  PanopticQualityAccumulator acc(classes);
  acc.add(pred.map, gt);
  return acc.report();
}

namespace {

struct IoUCounts {
  std::vector<std::size_t> inter, uni, present;

  explicit IoUCounts(std::size_t k) : inter(k, 0), uni(k, 0), present(k, 0) {}

  void add(const PanopticMap& pred, const PanopticMap& gt) {
    if (pred.height != gt.height || pred.width != gt.width) {
      throw ShapeError("miou: prediction and ground truth sizes differ");
    }
    const std::size_t k = inter.size();
    for (std::size_t px = 0; px < gt.class_ids.size(); ++px) {
      const int g = gt.class_ids[px];
      if (g == kVoidClass) continue;
      const int p = pred.class_ids[px];
      if (static_cast<std::size_t>(g) >= k || (p != kVoidClass && static_cast<std::size_t>(p) >= k)) {
        throw ArgumentError("miou: class id out of range");
      }
      ++present[static_cast<std::size_t>(g)];
      ++uni[static_cast<std::size_t>(g)];
      if (p == g) {
        ++inter[static_cast<std::size_t>(g)];
      } else if (p != kVoidClass) {
        ++uni[static_cast<std::size_t>(p)];
      }
    }
  }

  IoUReport report() const {
    IoUReport r;
    r.per_class.assign(inter.size(), std::numeric_limits<double>::quiet_NaN());
    double total = 0;
    std::size_t count = 0;
    for (std::size_t c = 0; c < inter.size(); ++c) {
      if (!present[c]) continue;
      r.per_class[c] = static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
      total += r.per_class[c];
      ++count;
    }
    r.miou = count ? total / static_cast<double>(count) : 0.0;
    return r;
  }
};

}  // namespace

IoUReport class_iou(const PanopticMap& pred, const PanopticMap& gt, std::size_t num_classes) {
  IoUCounts counts(num_classes);
  counts.add(pred, gt);
  return counts.report();
}

double miou(const PanopticResult& pred, const PanopticMap& gt, std::size_t num_classes) {
  return class_iou(pred.map, gt, num_classes).miou;
}

Tensor resize_bilinear(const Tensor& map, std::size_t height, std::size_t width,
                       std::size_t out_height, std::size_t out_width) {
  if (map.rank() != 2 || map.dim(0) != height * width) {
    throw ShapeError("resize_bilinear: expected " + std::to_string(height * width) + " rows, got " +
                     shape_to_string(map.shape()));
  }
  const std::size_t c = map.dim(1);
  const auto src = map.data();
  std::vector<double> out(out_height * out_width * c);
  auto coord = [](std::size_t i, std::size_t in, std::size_t out_n, std::size_t& lo,
                  std::size_t& hi, double& t) {
    double s = (static_cast<double>(i) + 0.5) * static_cast<double>(in) / static_cast<double>(out_n) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    lo = static_cast<std::size_t>(std::floor(s));
    hi = std::min(lo + 1, in - 1);
    t = s - static_cast<double>(lo);
  };
  for (std::size_t y = 0; y < out_height; ++y) {
    std::size_t y0, y1;
    double ty;
    coord(y, height, out_height, y0, y1, ty);
    for (std::size_t x = 0; x < out_width; ++x) {
      std::size_t x0, x1;
      double tx;
      coord(x, width, out_width, x0, x1, tx);
      const double* a = &src[(y0 * width + x0) * c];
      const double* b = &src[(y0 * width + x1) * c];
      const double* d = &src[(y1 * width + x0) * c];
      const double* e = &src[(y1 * width + x1) * c];
      double* o = &out[(y * out_width + x) * c];
      for (std::size_t j = 0; j < c; ++j) {
        o[j] = (1 - ty) * ((1 - tx) * a[j] + tx * b[j]) + ty * ((1 - tx) * d[j] + tx * e[j]);
      }
    }
  }
  return Tensor({out_height * out_width, c}, std::move(out));
}

PanopticResult predict_panoptic(const KMaxModel& model, const ImageTensor& image,
                                const ClassTable& classes, const MergeOptions& options) {
  NoGradGuard no_grad;
  const ModelOutput out = model_forward(model, image, false);
  const std::size_t h = image.height(), w = image.width();
  const Tensor logits =
      resize_bilinear(out.final.mask_logits, out.mask_height, out.mask_width, h, w);
  PredictionSet pred{softmax(logits, 1), softmax(out.final.class_logits, 1), h, w};
  return merge_masks(pred, classes, options);
}

EvalReport evaluate(const KMaxModel& model, const SceneSpec& spec, std::size_t count,
                    const MergeOptions& options, std::size_t threads) {
  const ClassTable classes = spec.class_table();
  std::vector<PanopticResult> preds(count);
  std::vector<PanopticMap> gts(count);
  auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < count; i += stride) {
      Sample s = generate(spec, i);
      preds[i] = predict_panoptic(model, s.image, classes, options);
      gts[i] = std::move(s.gt);
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t, threads);
    for (auto& t : pool) t.join();
  }

  PanopticQualityAccumulator acc(classes);
  IoUCounts iou(classes.size());
  for (std::size_t i = 0; i < count; ++i) {
    acc.add(preds[i].map, gts[i]);
    iou.add(preds[i].map, gts[i]);
  }
  EvalReport r;
  r.images = count;
  r.quality = acc.report();
  r.miou = iou.report().miou;
  return r;
}

std::string format_report(const EvalReport& report) {
  std::string out;
  char buf[256];
  auto line = [&](const char* key, double v) {
    std::snprintf(buf, sizeof(buf), "%-6s %.6f\n", key, v);
    out += buf;
  };
  out += "images " + std::to_string(report.images) + "\n";
  line("PQ", report.quality.pq);
  line("PQ_Th", report.quality.pq_th);
  line("PQ_St", report.quality.pq_st);
  line("SQ", report.quality.sq);
  line("RQ", report.quality.rq);
  line("mIoU", report.miou);
  out += "class  id name         kind      PQ       SQ       RQ     TP     FP     FN\n";
  for (const auto& c : report.quality.per_class) {
    std::snprintf(buf, sizeof(buf), "class %3d %-12s %-5s %8.6f %8.6f %8.6f %6zu %6zu %6zu\n",
                  c.class_id, c.name.c_str(), c.is_thing ? "thing" : "stuff", c.pq(), c.sq(),
                  c.rq(), c.tp, c.fp, c.fn);
    out += buf;
  }
  return out;
}

}  // namespace kmax
