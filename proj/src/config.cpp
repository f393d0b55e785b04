#include "kmax/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace kmax {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

struct Field {
  std::string key;
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, const std::string&)> set;
};

template <typename Section>
Field size_field(std::string key, Section Config::*sec, std::size_t Section::*member) {
  return {key, [=](const Config& c) { return std::to_string(c.*sec.*member); },
          [=](Config& c, const std::string& v) { c.*sec.*member = parse_uint(key, v); }};
}

template <typename Section>
Field u64_field(std::string key, Section Config::*sec, std::uint64_t Section::*member) {
  return {key, [=](const Config& c) { return std::to_string(c.*sec.*member); },
          [=](Config& c, const std::string& v) { c.*sec.*member = parse_uint(key, v); }};
}

template <typename Section>
Field double_field(std::string key, Section Config::*sec, double Section::*member) {
  return {key, [=](const Config& c) { return format_double(c.*sec.*member); },
          [=](Config& c, const std::string& v) { c.*sec.*member = parse_double(key, v); }};
}

template <typename Section>
Field bool_field(std::string key, Section Config::*sec, bool Section::*member) {
  return {key, [=](const Config& c) { return std::string(c.*sec.*member ? "true" : "false"); },
          [=](Config& c, const std::string& v) { c.*sec.*member = parse_bool(key, v); }};
}

template <typename Section>
Field size_list_field(std::string key, Section Config::*sec,
                      std::vector<std::size_t> Section::*member) {
  return {key,
          [=](const Config& c) {
            std::string out;
            for (auto v : c.*sec.*member) out += (out.empty() ? "" : ",") + std::to_string(v);
            return out;
          },
          [=](Config& c, const std::string& v) {
            std::vector<std::size_t> out;
            for (const auto& item : split_list(v)) out.push_back(parse_uint(key, item));
            c.*sec.*member = out;
          }};
}

template <typename Section>
Field string_list_field(std::string key, Section Config::*sec,
                        std::vector<std::string> Section::*member) {
  return {key,
          [=](const Config& c) {
            std::string out;
            for (const auto& v : c.*sec.*member) out += (out.empty() ? "" : ",") + v;
            return out;
          },
          [=](Config& c, const std::string& v) { c.*sec.*member = split_list(v); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    using C = Config;
    std::vector<Field> f;
    f.push_back(size_field("model.dim", &C::model, &ModelConfig::dim));
    f.push_back(size_field("model.num_queries", &C::model, &ModelConfig::num_queries));
    f.push_back(size_field("model.num_classes", &C::model, &ModelConfig::num_classes));
    f.push_back(size_field("model.ffn_hidden", &C::model, &ModelConfig::ffn_hidden));
    f.push_back(size_list_field("model.encoder_channels", &C::model, &ModelConfig::encoder_channels));
    f.push_back(size_field("model.encoder_depth", &C::model, &ModelConfig::encoder_depth));
    f.push_back(size_list_field("model.schedule", &C::model, &ModelConfig::schedule));
    f.push_back({"model.kernel", [](const C& c) { return std::string(to_string(c.model.kernel)); },
                 [](C& c, const std::string& v) { c.model.kernel = parse_kernel(v); }});
    f.push_back(bool_field("model.kmeans_normalize", &C::model, &ModelConfig::kmeans_normalize));
    f.push_back(size_field("model.kernel_heads", &C::model, &ModelConfig::kernel_heads));
    f.push_back(size_field("model.self_attention_heads", &C::model, &ModelConfig::self_attention_heads));
    f.push_back(bool_field("model.self_attention_first", &C::model, &ModelConfig::self_attention_first));
    f.push_back(bool_field("model.share_class_head", &C::model, &ModelConfig::share_class_head));
    f.push_back(bool_field("model.scaled_softmax", &C::model, &ModelConfig::scaled_softmax));
    f.push_back(bool_field("model.scaled_mask_logits", &C::model, &ModelConfig::scaled_mask_logits));
    f.push_back(bool_field("model.drop_query", &C::model, &ModelConfig::drop_query));
    f.push_back(bool_field("model.coord_channels", &C::model, &ModelConfig::coord_channels));

    f.push_back(size_field("train.steps", &C::train, &TrainConfig::steps));
    f.push_back(size_field("train.batch_size", &C::train, &TrainConfig::batch_size));
    f.push_back(double_field("train.lr", &C::train, &TrainConfig::lr));
    f.push_back(double_field("train.warmup_fraction", &C::train, &TrainConfig::warmup_fraction));
    f.push_back(double_field("train.weight_decay", &C::train, &TrainConfig::weight_decay));
    f.push_back(double_field("train.beta1", &C::train, &TrainConfig::beta1));
    f.push_back(double_field("train.beta2", &C::train, &TrainConfig::beta2));
    f.push_back(double_field("train.adam_eps", &C::train, &TrainConfig::adam_eps));
    f.push_back(double_field("train.grad_clip", &C::train, &TrainConfig::grad_clip));
    f.push_back(u64_field("train.seed", &C::train, &TrainConfig::seed));
    f.push_back(double_field("train.w_pq", &C::train, &TrainConfig::w_pq));
    f.push_back(double_field("train.w_sem", &C::train, &TrainConfig::w_sem));
    f.push_back(double_field("train.w_maskid", &C::train, &TrainConfig::w_maskid));
    f.push_back(double_field("train.w_instance", &C::train, &TrainConfig::w_instance));
    f.push_back(double_field("train.void_weight", &C::train, &TrainConfig::void_weight));
    f.push_back(bool_field("train.aux_loss", &C::train, &TrainConfig::aux_loss));
    f.push_back(bool_field("train.flip", &C::train, &TrainConfig::flip));
    f.push_back(size_field("train.train_size", &C::train, &TrainConfig::train_size));
    f.push_back(size_field("train.log_every", &C::train, &TrainConfig::log_every));
    f.push_back(size_field("train.val_every", &C::train, &TrainConfig::val_every));

    f.push_back(u64_field("data.seed", &C::data, &DataConfig::seed));
    f.push_back(u64_field("data.val_seed", &C::data, &DataConfig::val_seed));
    f.push_back(size_field("data.image_size", &C::data, &DataConfig::image_size));
    f.push_back(size_field("data.min_shapes", &C::data, &DataConfig::min_shapes));
    f.push_back(size_field("data.max_shapes", &C::data, &DataConfig::max_shapes));
    f.push_back(size_field("data.min_shape_size", &C::data, &DataConfig::min_shape_size));
    f.push_back(size_field("data.max_shape_size", &C::data, &DataConfig::max_shape_size));
    f.push_back(double_field("data.color_jitter", &C::data, &DataConfig::color_jitter));
    f.push_back(double_field("data.max_occlusion", &C::data, &DataConfig::max_occlusion));
    f.push_back(string_list_field("data.thing_classes", &C::data, &DataConfig::thing_classes));
    f.push_back(string_list_field("data.stuff_classes", &C::data, &DataConfig::stuff_classes));
    f.push_back(size_field("data.val_size", &C::data, &DataConfig::val_size));
    f.push_back(size_field("data.threads", &C::data, &DataConfig::threads));

    f.push_back(double_field("infer.conf_thresh", &C::infer, &InferConfig::conf_thresh));
    f.push_back(double_field("infer.overlap_thresh", &C::infer, &InferConfig::overlap_thresh));
    f.push_back(double_field("infer.mask_thresh", &C::infer, &InferConfig::mask_thresh));
    return f;
  }();
  return table;
}

const Field& find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

Config Config::parse(std::string_view text) {
  Config cfg;
  std::string section;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const std::string_view raw =
        text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ConfigError("line " + std::to_string(line_no) + ": malformed section header");
      }
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    std::string key = trim(std::string_view(line).substr(0, eq));
    if (key.find('.') == std::string::npos) {
      if (section.empty()) {
        throw ConfigError("line " + std::to_string(line_no) + ": key '" + key + "' outside a section");
      }
      key = section + "." + key;
    }
    cfg.set(key, trim(std::string_view(line).substr(eq + 1)));
  }
  return cfg;
}

Config Config::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string Config::serialize() const {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    const auto dot = f.key.find('.');
    const std::string sec = f.key.substr(0, dot);
    if (sec != section) {
      if (!section.empty()) out += '\n';
      out += "[" + sec + "]\n";
      section = sec;
    }
    out += f.key.substr(dot + 1) + " = " + f.get(*this) + "\n";
  }
  return out;
}

void Config::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write config file '" + path + "'");
  out << serialize();
}

void Config::set(const std::string& key, const std::string& value) {
  find_field(key).set(*this, value);
}

std::string Config::get(const std::string& key) const { return find_field(key).get(*this); }

std::vector<std::string> Config::keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.push_back(f.key);
  return out;
}

void Config::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (model.dim == 0) fail("model.dim must be positive");
  if (model.num_queries == 0) fail("model.num_queries must be positive");
  if (model.ffn_hidden == 0) fail("model.ffn_hidden must be positive");
  if (model.encoder_channels.size() != 5) fail("model.encoder_channels needs 5 widths (strides 2..32)");
  for (auto c : model.encoder_channels)
    if (c == 0) fail("model.encoder_channels entries must be positive");
  if (model.schedule.size() != 3) fail("model.schedule needs 3 entries (strides 32, 16, 8)");
  std::size_t blocks = 0;
  for (auto s : model.schedule) blocks += s;
  if (blocks == 0) fail("model.schedule is empty: at least one decoder block is required");
  if (model.kernel_heads == 0 || model.dim % model.kernel_heads != 0) {
    fail("model.kernel_heads must divide model.dim");
  }
  if (model.self_attention_heads == 0 || model.dim % model.self_attention_heads != 0) {
    fail("model.self_attention_heads must divide model.dim");
  }
  if (model.drop_query && model.num_queries < 2) fail("model.drop_query needs at least 2 queries");
  {
    const std::size_t queries = model.drop_query ? model.num_queries / 2 : model.num_queries;
    const std::size_t segments = data.max_shapes + data.stuff_classes.size();
    if (queries < segments) {
      fail("model.num_queries: " + std::to_string(queries) + " queries per training pass cannot match up to " +
           std::to_string(segments) + " segments per scene");
    }
  }
  if (model.num_classes != data.thing_classes.size() + data.stuff_classes.size()) {
    fail("model.num_classes (" + std::to_string(model.num_classes) +
         ") must equal the number of thing + stuff classes (" +
         std::to_string(data.thing_classes.size() + data.stuff_classes.size()) + ")");
  }
  if (train.batch_size == 0) fail("train.batch_size must be positive");
  if (train.lr < 0.0) fail("train.lr must be non-negative");
  if (train.warmup_fraction < 0.0 || train.warmup_fraction > 1.0) fail("train.warmup_fraction must be in [0, 1]");
  if (train.weight_decay < 0.0) fail("train.weight_decay must be non-negative");
  if (train.beta1 < 0.0 || train.beta1 >= 1.0 || train.beta2 < 0.0 || train.beta2 >= 1.0) {
    fail("train.beta1/beta2 must be in [0, 1)");
  }
  if (train.adam_eps <= 0.0) fail("train.adam_eps must be positive");
  if (train.grad_clip < 0.0) fail("train.grad_clip must be >= 0");
  if (train.w_instance != 0.0) fail("train.w_instance: instance discrimination loss is not available");
  if (train.train_size == 0) fail("train.train_size must be positive");
  if (train.log_every == 0) fail("train.log_every must be positive");
  if (data.image_size == 0 || data.image_size % 32 != 0) fail("data.image_size must be a positive multiple of 32");
  if (data.min_shapes == 0 || data.min_shapes > data.max_shapes) fail("data.min_shapes/max_shapes invalid");
  if (data.min_shape_size == 0 || data.min_shape_size > data.max_shape_size) {
    fail("data.min_shape_size/max_shape_size invalid");
  }
  if (data.thing_classes.empty()) fail("data.thing_classes must not be empty");
  if (data.stuff_classes.empty() || data.stuff_classes.size() > 2) {
    fail("data.stuff_classes needs 1 (shared background) or 2 (flat,gradient) entries");
  }
  for (const auto& t : data.thing_classes) {
    if (t != "circle" && t != "rectangle" && t != "triangle") fail("data.thing_classes: unknown shape '" + t + "'");
  }
  if (data.val_size == 0) fail("data.val_size must be positive");
  if (data.threads == 0) fail("data.threads must be positive");
  for (double t : {infer.conf_thresh, infer.overlap_thresh, infer.mask_thresh}) {
    if (t < 0.0 || t > 1.0) fail("infer thresholds must be in [0, 1]");
  }
}

}  // namespace kmax
