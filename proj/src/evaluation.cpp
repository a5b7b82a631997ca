#include "vismal/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <ctime>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>

#include "vismal/error.hpp"
#include "vismal/random.hpp"

namespace vismal {

std::vector<std::vector<std::size_t>> stratified_folds(std::span<const std::size_t> labels,
                                                       std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("fold count must be >= 2");
  std::size_t families = 0;
  for (auto y : labels) families = std::max(families, y + 1);
  std::vector<std::vector<std::size_t>> members(families);
  for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(i);

  std::vector<std::vector<std::size_t>> folds(k);
  for (std::size_t f = 0; f < families; ++f) {
    Rng rng(derive_seed(seed, f));
    shuffle(members[f].begin(), members[f].end(), rng);
    for (std::size_t i = 0; i < members[f].size(); ++i) folds[i % k].push_back(members[f][i]);
  }
  for (auto& fold : folds) std::sort(fold.begin(), fold.end());
  return folds;
}

ConfusionMatrix::ConfusionMatrix(std::size_t n, std::vector<std::string> family_names)
    : n_(n), counts_(n * n, 0), names_(std::move(family_names)) {
  if (!names_.empty() && names_.size() != n_) {
    throw ConfigError("family name count does not match matrix size");
  }
}

void ConfusionMatrix::add(std::size_t truth, std::size_t predicted) {
  if (truth >= n_ || predicted >= n_) {
    throw LabelError("label pair (" + std::to_string(truth) + ", " + std::to_string(predicted) +
                     ") out of range for " + std::to_string(n_) + " families");
  }
  ++counts_[truth * n_ + predicted];
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw ShapeError("cannot merge confusion matrices of different sizes");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::string ConfusionMatrix::family_name(std::size_t i) const {
  return i < names_.size() ? names_[i] : "family_" + std::to_string(i);
}

std::uint64_t ConfusionMatrix::total() const noexcept {
  std::uint64_t sum = 0;
  for (auto c : counts_) sum += c;
  return sum;
}

std::uint64_t ConfusionMatrix::trace() const noexcept {
  std::uint64_t sum = 0;
  for (std::size_t i = 0; i < n_; ++i) sum += counts_[i * n_ + i];
  return sum;
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t i) const {
  std::uint64_t sum = 0;
  for (std::size_t j = 0; j < n_; ++j) sum += at(i, j);
  return sum;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t j) const {
  std::uint64_t sum = 0;
  for (std::size_t i = 0; i < n_; ++i) sum += at(i, j);
  return sum;
}

ConfusionMatrix confusion(std::span<const std::size_t> truth, std::span<const std::size_t> predicted,
                          std::size_t n, std::vector<std::string> family_names) {
  if (truth.size() != predicted.size()) throw ShapeError("label sequences differ in length");
  ConfusionMatrix cm(n, std::move(family_names));
  for (std::size_t i = 0; i < truth.size(); ++i) cm.add(truth[i], predicted[i]);
  return cm;
}

namespace {

double percent(std::uint64_t num, std::uint64_t den, bool& degenerate) {
  if (den == 0) {
    degenerate = true;
    return 0.0;
  }
  return 100.0 * static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

FamilyMetrics family_metrics(const ConfusionMatrix& cm, std::size_t family) {
  if (family >= cm.size()) throw LabelError("family index out of range");
  FamilyMetrics m;
  const auto tp = cm.tp(family);
  const auto fn = cm.fn(family);
  const auto fp = cm.fp(family);
  const auto tn = cm.tn(family);
  m.support = tp + fn;
  m.precision = percent(tp, tp + fp, m.degenerate);
  m.recall = percent(tp, tp + fn, m.degenerate);
  if (m.precision + m.recall > 0.0) {
    m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  } else {
    m.degenerate = true;
  }
  m.accuracy = percent(tp + tn, tp + fn + fp + tn, m.degenerate);
  return m;
}

EvalReport weighted_report(const ConfusionMatrix& cm) {
  EvalReport report;
  report.confusion = cm;
  report.total = cm.total();
  for (std::size_t i = 0; i < cm.size(); ++i) {
    report.family_names.push_back(cm.family_name(i));
    report.families.push_back(family_metrics(cm, i));
  }
  bool degenerate = false;
  report.overall_accuracy = percent(cm.trace(), report.total, degenerate);
  if (report.total > 0) {
    auto& w = report.weighted;
    for (const auto& f : report.families) {
      const double share = static_cast<double>(f.support) / static_cast<double>(report.total);
      w.precision += share * f.precision;
      w.recall += share * f.recall;
      w.f1 += share * f.f1;
      w.accuracy += share * f.accuracy;
      w.degenerate = w.degenerate || f.degenerate;
    }
    w.support = report.total;
  } else {
    report.weighted.degenerate = true;
  }
  return report;
}

namespace {

std::string fixed1(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(1) << v;
  return s.str();
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  fields.push_back(cur);
  return fields;
}

}  // namespace

void write_report_csv(const EvalReport& report, std::ostream& out) {
  out << "family,precision,recall,f1,accuracy,support,degenerate\n";
  auto row = [&](const std::string& name, const FamilyMetrics& m) {
    out << csv_field(name) << ',' << fixed1(m.precision) << ',' << fixed1(m.recall) << ','
        << fixed1(m.f1) << ',' << fixed1(m.accuracy) << ',' << m.support << ','
        << (m.degenerate ? 1 : 0) << '\n';
  };
  for (std::size_t i = 0; i < report.families.size(); ++i) row(report.family_names[i], report.families[i]);
  row("weighted avg", report.weighted);
}

void write_report_text(const EvalReport& report, std::ostream& out) {
  std::size_t name_width = std::string("weighted avg").size();
  for (const auto& n : report.family_names) name_width = std::max(name_width, n.size());
  auto line = [&](const std::string& name, const std::string& p, const std::string& r,
                  const std::string& f, const std::string& a, const std::string& s) {
    out << std::left << std::setw(static_cast<int>(name_width)) << name << std::right
        << std::setw(11) << p << std::setw(9) << r << std::setw(10) << f << std::setw(10) << a
        << std::setw(9) << s << '\n';
  };
  line("family", "precision", "recall", "f1", "accuracy", "support");
  for (std::size_t i = 0; i < report.families.size(); ++i) {
    const auto& m = report.families[i];
    line(report.family_names[i] + (m.degenerate ? "*" : ""), fixed1(m.precision), fixed1(m.recall),
         fixed1(m.f1), fixed1(m.accuracy), std::to_string(m.support));
  }
  const auto& w = report.weighted;
  line("weighted avg", fixed1(w.precision), fixed1(w.recall), fixed1(w.f1), fixed1(w.accuracy),
       std::to_string(w.support));
  out << "overall accuracy: " << fixed1(report.overall_accuracy) << "% of " << report.total
      << " samples\n";
  bool any = false;
  for (const auto& m : report.families) any = any || m.degenerate;
  if (any) out << "* zero denominator in at least one metric; reported as 0\n";
}

void write_confusion_csv(const ConfusionMatrix& cm, std::ostream& out) {
  out << "true\\predicted";
  for (std::size_t j = 0; j < cm.size(); ++j) out << ',' << csv_field(cm.family_name(j));
  out << '\n';
  for (std::size_t i = 0; i < cm.size(); ++i) {
    out << csv_field(cm.family_name(i));
    for (std::size_t j = 0; j < cm.size(); ++j) out << ',' << cm.at(i, j);
    out << '\n';
  }
}

ConfusionMatrix read_confusion_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("confusion CSV is empty");
  auto header = split_csv_line(line);
  if (header.size() < 2) throw FormatError("confusion CSV header has no families");
  std::vector<std::string> names(header.begin() + 1, header.end());
  ConfusionMatrix cm(names.size(), names);
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    const auto fields = split_csv_line(line);
    if (row >= names.size() || fields.size() != names.size() + 1) {
      throw FormatError("confusion CSV row " + std::to_string(row + 1) + " is malformed");
    }
    for (std::size_t j = 0; j < names.size(); ++j) {
      try {
        std::size_t used = 0;
        cm.at(row, j) = std::stoull(fields[j + 1], &used);
        if (used != fields[j + 1].size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw FormatError("confusion CSV has a non-integer count: " + fields[j + 1]);
      }
    }
    ++row;
  }
  if (row != names.size()) throw FormatError("confusion CSV is not square");
  return cm;
}

double cpu_time_ms() {
  timespec ts{};
  clock_gettime(CLOCK_PROCESS_CPUTIME_ID, &ts);
  return static_cast<double>(ts.tv_sec) * 1e3 + static_cast<double>(ts.tv_nsec) * 1e-6;
}

MpeReport measure_mpe(double extraction_cpu_ms, double classification_cpu_ms, std::size_t num_files) {
  if (num_files == 0) throw ConfigError("MPE needs at least one file");
  MpeReport r;
  r.num_files = num_files;
  r.extraction_ms = extraction_cpu_ms / static_cast<double>(num_files);
  r.classification_ms = classification_cpu_ms / static_cast<double>(num_files);
  r.total_ms = r.extraction_ms + r.classification_ms;
  return r;
}

void write_mpe_csv(const MpeReport& mpe, std::ostream& out) {
  out << "num_files,extraction_ms,classification_ms,total_ms\n"
      << mpe.num_files << ',' << std::setprecision(6) << mpe.extraction_ms << ','
      << mpe.classification_ms << ',' << mpe.total_ms << '\n';
}

}  // namespace vismal
