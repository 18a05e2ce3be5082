#include <cmath>
#include <cstdio>
#include <limits>

#include <json.hpp>

#include "musicssl/common.hpp"
#include "musicssl/metrics.hpp"

namespace musicssl {

using nlohmann::ordered_json;

void MetricReport::validate() const {
  if (task.empty()) throw DataError("metric report without task name");
  for (const auto& [name, v] : metrics)
    if (!std::isfinite(v)) throw DataError("metric '" + name + "' is not finite");
}

std::string MetricReport::to_json() const {
  validate();
  ordered_json j;
  j["task"] = task;
  j["split"] = split;
  j["config_hash"] = config_hash;
  j["metrics"] = ordered_json::object();
  for (const auto& [name, v] : metrics) j["metrics"][name] = v;
  if (!per_tag.empty()) {
    j["per_tag"] = ordered_json::object();
    for (const auto& [name, values] : per_tag) {
      auto arr = ordered_json::array();
      for (double v : values) arr.push_back(std::isnan(v) ? ordered_json(nullptr) : ordered_json(v));
      j["per_tag"][name] = arr;
    }
  }
  if (!excluded_tags.empty()) j["excluded_tags"] = excluded_tags;
  return j.dump(2) + "\n";
}

std::string MetricReport::to_text() const {
  validate();
  std::string out = "[report]\ntask=" + task + "\nsplit=" + split + "\nconfig_hash=" + config_hash + "\n";
  out += "[metrics]\n";
  char buf[64];
  for (const auto& [name, v] : metrics) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    out += name + "=" + buf + "\n";
  }
  for (const auto& [name, values] : per_tag) {
    out += "[per_tag." + name + "]\n";
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (std::isnan(values[i])) {
        out += std::to_string(i) + "=excluded\n";
      } else {
        std::snprintf(buf, sizeof buf, "%.6f", values[i]);
        out += std::to_string(i) + "=" + buf + "\n";
      }
    }
  }
  return out;
}

MetricReport MetricReport::from_json(const std::string& text) {
  MetricReport r;
  try {
    const auto j = ordered_json::parse(text);
    r.task = j.at("task").get<std::string>();
    r.split = j.at("split").get<std::string>();
    r.config_hash = j.at("config_hash").get<std::string>();
    for (const auto& [name, v] : j.at("metrics").items()) r.metrics[name] = v.get<double>();
    if (j.contains("per_tag")) {
      for (const auto& [name, arr] : j["per_tag"].items()) {
        auto& dst = r.per_tag[name];
        for (const auto& v : arr)
          dst.push_back(v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>());
      }
    }
    if (j.contains("excluded_tags")) r.excluded_tags = j["excluded_tags"].get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed metric report: ") + e.what());
  }
  r.validate();
  return r;
}

}  // namespace musicssl
