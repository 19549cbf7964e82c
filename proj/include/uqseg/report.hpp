// EvalReport serialization: JSON, CSV and a fixed-width console table.
#pragma once

#include <cmath>
#include <cstdio>
#include <optional>
#include <string>

#include <json.hpp>

#include "uqseg/metrics.hpp"

namespace uqseg {

/// Values are rounded to 10 decimals so reports stay byte-stable across
/// summation orders that differ only in the last bits.
inline nlohmann::ordered_json report_value(const std::optional<double>& v) {
  if (!v) return nullptr;
  return std::round(*v * 1e10) / 1e10;
}

inline std::string aggregation_name(Aggregation a) {
  return a == Aggregation::kGlobal ? "global" : "per-image";
}

inline Aggregation parse_aggregation(const std::string& s) {
  if (s == "global") return Aggregation::kGlobal;
  if (s == "per-image") return Aggregation::kPerImage;
  throw DataError("unknown aggregation mode: " + s);
}

inline nlohmann::ordered_json report_to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["mAUROC"] = report_value(r.mauroc);
  j["mAUPR"] = report_value(r.maupr);
  j["mFPR"] = report_value(r.mfpr);
  j["mECE"] = report_value(r.mece);
  j["mIoU"] = report_value(r.miou);
  nlohmann::ordered_json per_class = nlohmann::ordered_json::array();
  for (const auto& v : r.per_class_iou) per_class.push_back(report_value(v));
  j["per_class_iou"] = per_class;
  j["pixel_counts"] = {{"total", r.pixel_counts.total},
                       {"labelled", r.pixel_counts.labelled},
                       {"ood", r.pixel_counts.ood},
                       {"ignored", r.pixel_counts.ignored}};
  j["num_images"] = r.num_images;
  j["aggregation"] = aggregation_name(r.aggregation);
  return j;
}

inline std::string report_json_string(const EvalReport& r) {
  return report_to_json(r).dump(2) + "\n";
}

namespace detail {
inline std::string fixed(const std::optional<double>& v, int decimals) {
  if (!v) return "NA";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, std::round(*v * 1e10) / 1e10);
  return buf;
}
}  // namespace detail

/// Header line plus one data row; undefined metrics print as NA.
inline std::string report_csv_string(const EvalReport& r) {
  std::string s = "mAUROC,mAUPR,mFPR,mECE,mIoU\n";
  s += detail::fixed(r.mauroc, 10) + "," + detail::fixed(r.maupr, 10) + "," +
       detail::fixed(r.mfpr, 10) + "," + detail::fixed(r.mece, 10) + "," +
       detail::fixed(r.miou, 10) + "\n";
  return s;
}

inline std::string report_table_string(const EvalReport& r) {
  char buf[256];
  std::string s;
  std::snprintf(buf, sizeof(buf), "%-10s%-10s%-10s%-10s%-10s\n", "mAUROC",
                "mAUPR", "mFPR", "mECE", "mIoU");
  s += buf;
  std::snprintf(buf, sizeof(buf), "%-10s%-10s%-10s%-10s%-10s\n",
                detail::fixed(r.mauroc, 4).c_str(), detail::fixed(r.maupr, 4).c_str(),
                detail::fixed(r.mfpr, 4).c_str(), detail::fixed(r.mece, 4).c_str(),
                detail::fixed(r.miou, 4).c_str());
  s += buf;
  return s;
}

}  // namespace uqseg
