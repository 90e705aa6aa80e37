#include "capsule/artifacts.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <fmt/format.h>

namespace capsule {

using nlohmann::json;

namespace {

std::ofstream open_for_write(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot open {} for writing", path.string()));
  return out;
}

void finish(std::ofstream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out) throw std::runtime_error(fmt::format("failed writing {}", path.string()));
}

double parse_number(const std::string& text, const std::filesystem::path& path, std::size_t line) {
  char* end = nullptr;
  const double value = std::strtod(text.c_str(), &end);
  if (text.empty() || end != text.c_str() + text.size()) {
    throw std::runtime_error(fmt::format("{}:{}: malformed number \"{}\"", path.string(), line, text));
  }
  return value;
}

std::string xml_escape(const std::string& text) {
  std::string out;
  for (char c : text) {
    switch (c) {
    case '&': out += "&amp;"; break;
    case '<': out += "&lt;"; break;
    case '>': out += "&gt;"; break;
    case '"': out += "&quot;"; break;
    default: out += c;
    }
  }
  return out;
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

} // namespace

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
  auto out = open_for_write(path);
  out << "epoch,train_loss,train_acc,val_loss,val_acc,wall_seconds\n";
  for (const auto& r : history) {
    out << fmt::format("{},{},{},{},{},{}\n", r.epoch, r.train_loss, r.train_accuracy, r.val_loss,
                       r.val_accuracy, r.wall_seconds);
  }
  finish(out, path);
}

std::vector<EpochRecord> read_history_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("cannot open {}", path.string()));
  std::string line;
  std::getline(in, line);
  if (line != "epoch,train_loss,train_acc,val_loss,val_acc,wall_seconds") {
    throw std::runtime_error(fmt::format("{}: unexpected header \"{}\"", path.string(), line));
  }
  std::vector<EpochRecord> history;
  for (std::size_t number = 2; std::getline(in, line); ++number) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != 6) {
      throw std::runtime_error(fmt::format("{}:{}: expected 6 columns", path.string(), number));
    }
    EpochRecord r;
    r.epoch = static_cast<std::size_t>(parse_number(cells[0], path, number));
    r.train_loss = parse_number(cells[1], path, number);
    r.train_accuracy = parse_number(cells[2], path, number);
    r.val_loss = parse_number(cells[3], path, number);
    r.val_accuracy = parse_number(cells[4], path, number);
    r.wall_seconds = parse_number(cells[5], path, number);
    history.push_back(r);
  }
  return history;
}

json metrics_to_json(const EvalReport& report, const std::vector<std::string>& class_names) {
  if (class_names.size() != report.auc.size()) {
    throw std::invalid_argument(fmt::format("metrics: {} class names for {} classes", class_names.size(),
                                            report.auc.size()));
  }
  json out;
  out["accuracy"] = number_or_null(report.accuracy);
  out["loss"] = number_or_null(report.loss);
  out["auc"] = json::object();
  out["roc"] = json::object();
  for (std::size_t k = 0; k < class_names.size(); ++k) {
    out["auc"][class_names[k]] = number_or_null(report.auc[k]);
    json points = json::array();
    for (const auto& p : report.roc[k]) points.push_back({p.fpr, p.tpr});
    out["roc"][class_names[k]] = points;
  }
  json flat = json::array();
  for (const auto& row : report.confusion) {
    for (auto v : row) flat.push_back(v);
  }
  out["confusion"] = flat;
  return out;
}

EvalReport metrics_from_json(const json& value, const std::vector<std::string>& class_names) {
  auto number = [](const json& v) {
    return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
  };
  EvalReport report;
  report.accuracy = number(value.at("accuracy"));
  report.loss = number(value.at("loss"));
  const std::size_t k = class_names.size();
  for (const auto& name : class_names) {
    report.auc.push_back(number(value.at("auc").at(name)));
    std::vector<RocPoint> points;
    for (const auto& p : value.at("roc").at(name)) points.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    report.roc.push_back(std::move(points));
  }
  const auto& flat = value.at("confusion");
  if (flat.size() != k * k) {
    throw std::runtime_error(fmt::format("metrics: confusion has {} entries, expected {}", flat.size(), k * k));
  }
  report.confusion.assign(k, std::vector<std::size_t>(k));
  for (std::size_t i = 0; i < k * k; ++i) report.confusion[i / k][i % k] = flat[i].get<std::size_t>();
  return report;
}

std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<Series>& series,
                           double y_min, double y_max) {
  constexpr double width = 640, height = 420, left = 70, right = 150, top = 40, bottom = 60;
  constexpr const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  const double plot_w = width - left - right, plot_h = height - top - bottom;

  double x_min = std::numeric_limits<double>::infinity(), x_max = -x_min;
  for (const auto& s : series) {
    for (double x : s.x) {
      x_min = std::min(x_min, x);
      x_max = std::max(x_max, x);
    }
  }
  if (!std::isfinite(x_min)) x_min = 0, x_max = 1;
  if (x_max == x_min) x_max = x_min + 1;
  if (y_max == y_min) y_max = y_min + 1;
  auto px = [&](double x) { return left + (x - x_min) / (x_max - x_min) * plot_w; };
  auto py = [&](double y) { return top + (1.0 - (y - y_min) / (y_max - y_min)) * plot_h; };

  std::string svg = fmt::format(
      "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\">\n"
      "<rect width=\"{0}\" height=\"{1}\" fill=\"white\"/>\n"
      "<text x=\"{2}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{3}</text>\n",
      width, height, left + plot_w / 2, xml_escape(title));
  svg += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n",
                     left, top, plot_w, plot_h);
  for (int tick = 0; tick <= 4; ++tick) {
    const double yv = y_min + (y_max - y_min) * tick / 4.0;
    const double xv = x_min + (x_max - x_min) * tick / 4.0;
    svg += fmt::format("<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" "
                       "text-anchor=\"end\">{:.3g}</text>\n",
                       left - 6, py(yv) + 4, yv);
    svg += fmt::format("<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" "
                       "text-anchor=\"middle\">{:.3g}</text>\n",
                       px(xv), top + plot_h + 16, xv);
  }
  svg += fmt::format("<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" "
                     "text-anchor=\"middle\">{}</text>\n",
                     left + plot_w / 2, height - 20, xml_escape(x_label));
  svg += fmt::format("<text x=\"18\" y=\"{0}\" font-family=\"sans-serif\" font-size=\"12\" "
                     "text-anchor=\"middle\" transform=\"rotate(-90 18 {0})\">{1}</text>\n",
                     top + plot_h / 2, xml_escape(y_label));

  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = palette[s % std::size(palette)];
    std::string points;
    for (std::size_t i = 0; i < std::min(series[s].x.size(), series[s].y.size()); ++i) {
      if (!std::isfinite(series[s].y[i])) continue;
      const double y = std::clamp(series[s].y[i], y_min, y_max);
      points += fmt::format("{:.2f},{:.2f} ", px(series[s].x[i]), py(y));
    }
    if (!points.empty()) points.pop_back();
    svg += fmt::format("<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>\n",
                       color, points);
    const double ly = top + 16 + 18 * static_cast<double>(s);
    svg += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"{3}\" stroke-width=\"2\"/>\n",
                       left + plot_w + 10, ly, left + plot_w + 30, color);
    svg += fmt::format("<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
                       left + plot_w + 36, ly + 4, xml_escape(series[s].label));
  }
  svg += "</svg>\n";
  return svg;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  auto out = open_for_write(path);
  out << text;
  finish(out, path);
}

} // namespace

std::vector<std::string> export_report(const std::filesystem::path& out_dir, const EvalReport& report,
                                       const std::vector<std::string>& class_names) {
  std::filesystem::create_directories(out_dir);
  std::vector<std::string> written;

  write_text(out_dir / "metrics.json", metrics_to_json(report, class_names).dump(2) + "\n");
  written.push_back("metrics.json");

  std::vector<Series> roc_series;
  for (std::size_t k = 0; k < class_names.size(); ++k) {
    const std::string name = "roc_" + class_names[k] + ".csv";
    auto out = open_for_write(out_dir / name);
    out << "fpr,tpr\n";
    Series s{fmt::format("{} (AUC {:.3f})", class_names[k], report.auc[k]), {}, {}};
    for (const auto& p : report.roc[k]) {
      out << fmt::format("{},{}\n", p.fpr, p.tpr);
      s.x.push_back(p.fpr);
      s.y.push_back(p.tpr);
    }
    finish(out, out_dir / name);
    written.push_back(name);
    roc_series.push_back(std::move(s));
  }
  roc_series.push_back({"chance", {0.0, 1.0}, {0.0, 1.0}});

  {
    auto out = open_for_write(out_dir / "confusion.csv");
    for (const auto& row : report.confusion) {
      for (std::size_t j = 0; j < row.size(); ++j) out << (j ? "," : "") << row[j];
      out << '\n';
    }
    finish(out, out_dir / "confusion.csv");
    written.push_back("confusion.csv");
  }

  write_text(out_dir / "roc.svg",
             svg_line_chart("ROC (one-vs-rest)", "false positive rate", "true positive rate",
                            roc_series, 0.0, 1.0));
  written.push_back("roc.svg");
  return written;
}

std::vector<std::string> export_artifacts(const std::filesystem::path& out_dir,
                                          const std::vector<EpochRecord>& history,
                                          const EvalReport* report,
                                          const std::vector<std::string>& class_names) {
  std::filesystem::create_directories(out_dir);
  std::vector<std::string> written;
  write_history_csv(out_dir / "history.csv", history);
  written.push_back("history.csv");

  Series train_acc{"train", {}, {}}, val_acc{"validation", {}, {}};
  Series train_loss{"train", {}, {}}, val_loss{"validation", {}, {}};
  double loss_max = 0.0;
  for (const auto& r : history) {
    const auto e = static_cast<double>(r.epoch);
    train_acc.x.push_back(e);
    train_acc.y.push_back(r.train_accuracy);
    val_acc.x.push_back(e);
    val_acc.y.push_back(r.val_accuracy);
    train_loss.x.push_back(e);
    train_loss.y.push_back(r.train_loss);
    val_loss.x.push_back(e);
    val_loss.y.push_back(r.val_loss);
    if (std::isfinite(r.train_loss)) loss_max = std::max(loss_max, r.train_loss);
    if (std::isfinite(r.val_loss)) loss_max = std::max(loss_max, r.val_loss);
  }
  write_text(out_dir / "accuracy.svg",
             svg_line_chart("Accuracy", "epoch", "accuracy", {train_acc, val_acc}, 0.0, 1.0));
  written.push_back("accuracy.svg");
  write_text(out_dir / "loss.svg",
             svg_line_chart("Loss (BCE)", "epoch", "loss", {train_loss, val_loss}, 0.0,
                            loss_max > 0.0 ? loss_max * 1.05 : 1.0));
  written.push_back("loss.svg");

  if (report != nullptr) {
    const auto more = export_report(out_dir, *report, class_names);
    written.insert(written.end(), more.begin(), more.end());
  }
  return written;
}

} // namespace capsule
