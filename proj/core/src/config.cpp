#include "detkd/config.hpp"

#include <fstream>
#include <initializer_list>

#include "json.hpp"

namespace detkd {

namespace {

using nlohmann::json;

void check_keys(const json& obj, const std::string& path,
                std::initializer_list<const char*> allowed) {
  for (const auto& [key, value] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed) {
      if (key == a) {
        ok = true;
        break;
      }
    }
    if (!ok) throw ConfigError(path + "." + key + ": unknown key");
  }
}

template <typename T>
void read(const json& obj, const std::string& path, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(path + "." + key + ": wrong type");
  }
}

void read_model(const json& obj, const std::string& path, ModelSpec& spec) {
  check_keys(obj, path, {"family", "channels", "rep_dim", "num_levels", "level_offset", "anchors"});
  read(obj, path, "family", spec.family);
  read(obj, path, "channels", spec.channels);
  read(obj, path, "rep_dim", spec.rep_dim);
  read(obj, path, "num_levels", spec.num_levels);
  read(obj, path, "level_offset", spec.level_offset);
  read(obj, path, "anchors", spec.anchors);
  if (spec.family != "two_stage" && spec.family != "dense") {
    throw ConfigError(path + ".family: must be 'two_stage' or 'dense'");
  }
}

}  // namespace

const char* method_name(Method m) {
  switch (m) {
    case Method::sgfi: return "sgfi";
    case Method::ckd: return "ckd";
    case Method::pred_cls: return "pred_cls";
    case Method::pred_reg_naive: return "pred_reg_naive";
    case Method::pred_reg_ca: return "pred_reg_ca";
    case Method::head_transfer: return "head_transfer";
    case Method::mask_whole: return "mask_whole";
    case Method::mask_gt: return "mask_gt";
  }
  return "?";
}

Method method_from_name(const std::string& name) {
  for (Method m : {Method::sgfi, Method::ckd, Method::pred_cls, Method::pred_reg_naive,
                   Method::pred_reg_ca, Method::head_transfer, Method::mask_whole,
                   Method::mask_gt}) {
    if (name == method_name(m)) return m;
  }
  throw ConfigError("methods: unknown method '" + name + "'");
}

std::vector<std::uint64_t> ExperimentConfig::run_seeds() const {
  if (!seeds.empty()) return seeds;
  return {seed};
}

double ExperimentConfig::weight_for(const std::string& part) const {
  auto it = loss_weights.find(part);
  return it == loss_weights.end() ? 1.0 : it->second;
}

ExperimentConfig parse_experiment_config(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config: root must be an object");
  check_keys(doc, "config",
             {"format_version", "scene", "num_scenes", "teacher", "student", "optim", "sgfi",
              "ckd", "methods", "loss_weights", "proposals_per_scene", "pos_fraction", "jitter",
              "dense_roi_iou_threshold", "dense_roi_neg_ratio", "seed", "seeds", "eval_scenes",
              "eval_proposals"});
  if (!doc.contains("format_version")) {
    throw ConfigError("config.format_version: missing required field");
  }
  if (doc["format_version"].get<int>() != 1) {
    throw ConfigError("config.format_version: unsupported version");
  }

  ExperimentConfig cfg;
  if (doc.contains("scene")) {
    const json& s = doc["scene"];
    check_keys(s, "config.scene",
               {"grid", "in_channels", "num_classes", "min_objects", "max_objects", "box_min",
                "box_max", "noise_sigma", "blob_amplitude"});
    read(s, "config.scene", "grid", cfg.scene.grid);
    read(s, "config.scene", "in_channels", cfg.scene.in_channels);
    read(s, "config.scene", "num_classes", cfg.scene.num_classes);
    read(s, "config.scene", "min_objects", cfg.scene.min_objects);
    read(s, "config.scene", "max_objects", cfg.scene.max_objects);
    read(s, "config.scene", "box_min", cfg.scene.box_min);
    read(s, "config.scene", "box_max", cfg.scene.box_max);
    read(s, "config.scene", "noise_sigma", cfg.scene.noise_sigma);
    read(s, "config.scene", "blob_amplitude", cfg.scene.blob_amplitude);
  }
  read(doc, "config", "num_scenes", cfg.num_scenes);
  if (doc.contains("teacher")) read_model(doc["teacher"], "config.teacher", cfg.teacher);
  if (doc.contains("student")) read_model(doc["student"], "config.student", cfg.student);
  if (doc.contains("optim")) {
    const json& o = doc["optim"];
    check_keys(o, "config.optim", {"lr0", "lr_min", "momentum", "weight_decay", "steps"});
    read(o, "config.optim", "lr0", cfg.optim.lr0);
    read(o, "config.optim", "lr_min", cfg.optim.lr_min);
    read(o, "config.optim", "momentum", cfg.optim.momentum);
    read(o, "config.optim", "weight_decay", cfg.optim.weight_decay);
    read(o, "config.optim", "steps", cfg.optim.total_steps);
  }
  if (doc.contains("sgfi")) {
    const json& s = doc["sgfi"];
    check_keys(s, "config.sgfi", {"tau_init", "key_dim", "roi_size", "positives_only"});
    read(s, "config.sgfi", "tau_init", cfg.sgfi.tau_init);
    read(s, "config.sgfi", "key_dim", cfg.sgfi.key_dim);
    read(s, "config.sgfi", "roi_size", cfg.sgfi.roi_size);
    read(s, "config.sgfi", "positives_only", cfg.sgfi.positives_only);
  }
  if (doc.contains("ckd")) {
    const json& c = doc["ckd"];
    check_keys(c, "config.ckd",
               {"gamma", "max_negatives", "queue_capacity", "iou_threshold",
                "filter_cross_image", "proj_dim"});
    read(c, "config.ckd", "gamma", cfg.ckd.gamma);
    read(c, "config.ckd", "max_negatives", cfg.ckd.max_negatives);
    read(c, "config.ckd", "queue_capacity", cfg.ckd.queue_capacity);
    read(c, "config.ckd", "iou_threshold", cfg.ckd.iou_threshold);
    read(c, "config.ckd", "filter_cross_image", cfg.ckd.filter_cross_image);
    read(c, "config.ckd", "proj_dim", cfg.ckd.proj_dim);
  }
  if (doc.contains("methods")) {
    for (const auto& m : doc["methods"]) {
      cfg.methods.insert(method_from_name(m.get<std::string>()));
    }
  }
  if (doc.contains("loss_weights")) {
    for (const auto& [key, value] : doc["loss_weights"].items()) {
      cfg.loss_weights[key] = value.get<double>();
    }
  }
  read(doc, "config", "proposals_per_scene", cfg.proposals_per_scene);
  read(doc, "config", "pos_fraction", cfg.pos_fraction);
  read(doc, "config", "jitter", cfg.jitter);
  read(doc, "config", "dense_roi_iou_threshold", cfg.dense_roi_iou_threshold);
  read(doc, "config", "dense_roi_neg_ratio", cfg.dense_roi_neg_ratio);
  read(doc, "config", "seed", cfg.seed);
  read(doc, "config", "seeds", cfg.seeds);
  read(doc, "config", "eval_scenes", cfg.eval_scenes);
  read(doc, "config", "eval_proposals", cfg.eval_proposals);

  validate_experiment_config(cfg);
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_experiment_config(text);
}

void validate_experiment_config(const ExperimentConfig& cfg) {
  if (cfg.teacher.family != "two_stage") {
    throw ConfigError("config.teacher.family: teachers are two-stage");
  }
  if (cfg.optim.total_steps < 0) throw ConfigError("config.optim.steps: must be >= 0");
  if (cfg.optim.lr0 < cfg.optim.lr_min) throw ConfigError("config.optim.lr0: below lr_min");
  if (cfg.sgfi.tau_init <= 0.0) throw ConfigError("config.sgfi.tau_init: must be positive");
  if (cfg.ckd.gamma <= 0.0) throw ConfigError("config.ckd.gamma: must be positive");
  if (cfg.ckd.max_negatives < 0) throw ConfigError("config.ckd.max_negatives: must be >= 0");
  if (cfg.ckd.iou_threshold < 0.0 || cfg.ckd.iou_threshold > 1.0) {
    throw ConfigError("config.ckd.iou_threshold: must be in [0, 1]");
  }
  if (cfg.pos_fraction < 0.0 || cfg.pos_fraction > 1.0) {
    throw ConfigError("config.pos_fraction: must be in [0, 1]");
  }
  if (cfg.num_scenes < 1) throw ConfigError("config.num_scenes: must be >= 1");
  if (cfg.scene.min_objects < 1 || cfg.scene.max_objects < cfg.scene.min_objects) {
    throw ConfigError("config.scene.min_objects: need 1 <= min <= max objects");
  }

  for (const ModelSpec* spec : {&cfg.teacher, &cfg.student}) {
    const int div = 1 << (spec->num_levels + spec->level_offset + 1);
    if (cfg.scene.grid % div != 0) {
      throw ConfigError("config.scene.grid: not divisible by 2^(num_levels + level_offset + 1)");
    }
  }

  const bool homogeneous = !cfg.student.is_dense();
  auto require_homogeneous = [&](Method m) {
    if (cfg.has(m) && !homogeneous) {
      throw ConfigError(std::string("config.methods: '") + method_name(m) +
                        "' requires a homogeneous two-stage pair");
    }
  };
  require_homogeneous(Method::head_transfer);
  require_homogeneous(Method::pred_reg_naive);
  require_homogeneous(Method::pred_reg_ca);
  require_homogeneous(Method::mask_whole);
  require_homogeneous(Method::mask_gt);

  if (cfg.has(Method::mask_whole) || cfg.has(Method::mask_gt)) {
    if (cfg.student.num_levels != cfg.teacher.num_levels ||
        cfg.student.level_offset != cfg.teacher.level_offset) {
      throw ConfigError("config.methods: mask baselines require aligned pyramids");
    }
  }
  if (cfg.has(Method::head_transfer)) {
    if (cfg.student.channels != cfg.teacher.channels ||
        cfg.student.rep_dim != cfg.teacher.rep_dim) {
      throw ConfigError("config.methods: head_transfer requires identical head shapes");
    }
  }
  if (cfg.has(Method::ckd) && cfg.student.rep_dim != cfg.teacher.rep_dim) {
    throw ConfigError(
        "config.methods: ckd shares one projection head, so student and teacher rep_dim must match");
  }
  if (cfg.student.is_dense() && cfg.student.anchors < 1) {
    throw ConfigError("config.student.anchors: must be >= 1");
  }
}

}  // namespace detkd
