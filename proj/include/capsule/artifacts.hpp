#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "capsule/training.hpp"

namespace capsule {

// File schemas
//   history.csv      epoch,train_loss,train_acc,val_loss,val_acc,wall_seconds
//   metrics.json     {accuracy, loss, auc: {class: number|null},
//                     confusion: row-major integers, roc: {class: [[fpr,tpr],...]}}
//   roc_<class>.csv  fpr,tpr
//   confusion.csv    K rows of K comma-separated integers (rows = true class)
// Numbers are written in shortest round-trip form.

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history);
std::vector<EpochRecord> read_history_csv(const std::filesystem::path& path);

nlohmann::json metrics_to_json(const EvalReport& report, const std::vector<std::string>& class_names);
EvalReport metrics_from_json(const nlohmann::json& value, const std::vector<std::string>& class_names);

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

/// Standalone SVG line chart.
std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<Series>& series,
                           double y_min, double y_max);

/// Writes history.csv, accuracy.svg and loss.svg; with a report also
/// metrics.json, roc_<class>.csv, confusion.csv and roc.svg. Returns the
/// written file names relative to out_dir.
std::vector<std::string> export_artifacts(const std::filesystem::path& out_dir,
                                          const std::vector<EpochRecord>& history,
                                          const EvalReport* report,
                                          const std::vector<std::string>& class_names);

/// Writes metrics.json, roc_<class>.csv, confusion.csv and roc.svg.
std::vector<std::string> export_report(const std::filesystem::path& out_dir, const EvalReport& report,
                                       const std::vector<std::string>& class_names);

} // namespace capsule
