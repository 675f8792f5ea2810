#include "detkd/checkpoint.hpp"

#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace detkd {

namespace {
using nlohmann::json;
}

std::string checkpoint_to_json(const std::vector<const Param*>& params) {
  json doc;
  doc["format_version"] = 1;
  json p = json::object();
  for (const Param* prm : params) {
    p[prm->name] = {{"shape", prm->value.shape}, {"data", prm->value.data}};
  }
  doc["params"] = p;
  return doc.dump(2);
}

void checkpoint_save(const std::string& path, const std::vector<const Param*>& params) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  out << checkpoint_to_json(params) << "\n";
}

void checkpoint_load_json(const std::string& text, const std::vector<Param*>& params) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("checkpoint parse error: ") + e.what());
  }
  if (!doc.contains("format_version") || doc["format_version"].get<int>() != 1) {
    throw std::runtime_error("checkpoint: unsupported or missing format_version");
  }
  if (!doc.contains("params") || !doc["params"].is_object()) {
    throw std::runtime_error("checkpoint: missing params object");
  }
  const json& p = doc["params"];
  if (p.size() != params.size()) {
    throw std::runtime_error("checkpoint: parameter count mismatch");
  }
  for (Param* prm : params) {
    if (!p.contains(prm->name)) {
      throw std::runtime_error("checkpoint: missing param " + prm->name);
    }
    const json& entry = p[prm->name];
    const auto shape = entry.at("shape").get<std::vector<int>>();
    if (shape != prm->value.shape) {
      throw std::runtime_error("checkpoint: shape mismatch for " + prm->name);
    }
    auto data = entry.at("data").get<std::vector<double>>();
    if (static_cast<std::int64_t>(data.size()) != prm->value.size()) {
      throw std::runtime_error("checkpoint: data length mismatch for " + prm->name);
    }
    prm->value.data = std::move(data);
  }
}

void checkpoint_load(const std::string& path, const std::vector<Param*>& params) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  checkpoint_load_json(text, params);
}

}  // namespace detkd
