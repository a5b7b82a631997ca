#pragma once

#include <cstddef>
#include <cstdint>
#include <ctime>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace vismal {

/// k disjoint index sets. Each family's samples are shuffled with `seed` and
/// dealt round-robin starting at fold 0, so per-family fold counts differ by
/// at most one.
std::vector<std::vector<std::size_t>> stratified_folds(std::span<const std::size_t> labels,
                                                       std::size_t k, std::uint64_t seed);

class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t n, std::vector<std::string> family_names = {});

  std::size_t size() const noexcept { return n_; }
  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts_[truth * n_ + predicted]; }
  std::uint64_t& at(std::size_t truth, std::size_t predicted) { return counts_[truth * n_ + predicted]; }
  void add(std::size_t truth, std::size_t predicted);
  void merge(const ConfusionMatrix& other);

  const std::vector<std::string>& family_names() const noexcept { return names_; }
  std::string family_name(std::size_t i) const;

  std::uint64_t total() const noexcept;
  std::uint64_t trace() const noexcept;
  std::uint64_t row_sum(std::size_t i) const;
  std::uint64_t col_sum(std::size_t j) const;

  /// Per-family counts as defined for the report: TN is the number of
  /// correct predictions for every other family.
  std::uint64_t tp(std::size_t i) const { return at(i, i); }
  std::uint64_t fn(std::size_t i) const { return row_sum(i) - at(i, i); }
  std::uint64_t fp(std::size_t i) const { return col_sum(i) - at(i, i); }
  std::uint64_t tn(std::size_t i) const { return trace() - at(i, i); }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t n_ = 0;
  std::vector<std::uint64_t> counts_;
  std::vector<std::string> names_;
};

/// Throws ShapeError on length mismatch and LabelError on labels >= n.
ConfusionMatrix confusion(std::span<const std::size_t> truth, std::span<const std::size_t> predicted,
                          std::size_t n, std::vector<std::string> family_names = {});

/// Percentages at full precision. Zero denominators give 0 and set `degenerate`.
struct FamilyMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double accuracy = 0.0;  // (TP + TN) / (TP + FN + FP + TN)
  std::uint64_t support = 0;
  bool degenerate = false;
};

FamilyMetrics family_metrics(const ConfusionMatrix& cm, std::size_t family);

struct EvalReport {
  std::vector<std::string> family_names;
  std::vector<FamilyMetrics> families;
  FamilyMetrics weighted;      // support-weighted means
  double overall_accuracy = 0.0;  // trace / total, percent
  std::uint64_t total = 0;
  ConfusionMatrix confusion;
};

EvalReport weighted_report(const ConfusionMatrix& cm);

/// family,precision,recall,f1,accuracy,support (+ weighted avg row).
/// Values rounded to one decimal place.
void write_report_csv(const EvalReport& report, std::ostream& out);
/// Aligned text table with the same columns.
void write_report_text(const EvalReport& report, std::ostream& out);
/// Header row of family names, then one row per true family.
void write_confusion_csv(const ConfusionMatrix& cm, std::ostream& out);
ConfusionMatrix read_confusion_csv(std::istream& in);

// ---------------------------------------------------------------------------
// Per-sample CPU timing

/// Process CPU time in milliseconds.
double cpu_time_ms();

/// Accumulates CPU time of the compute sections it wraps.
class StageTimer {
 public:
  void start() { started_ = cpu_time_ms(); }
  void stop() { total_ms_ += cpu_time_ms() - started_; }
  double total_ms() const noexcept { return total_ms_; }

  template <typename F>
  decltype(auto) time(F&& fn) {
    struct Guard {
      StageTimer& t;
      ~Guard() { t.stop(); }
    } guard{*this};
    start();
    return fn();
  }

 private:
  double started_ = 0.0;
  double total_ms_ = 0.0;
};

struct MpeReport {
  double extraction_ms = 0.0;      // per sample
  double classification_ms = 0.0;  // per sample
  double total_ms = 0.0;
  std::size_t num_files = 0;
};

/// Per-sample CPU time; throws ConfigError when num_files is 0.
MpeReport measure_mpe(double extraction_cpu_ms, double classification_cpu_ms, std::size_t num_files);

void write_mpe_csv(const MpeReport& mpe, std::ostream& out);

}  // namespace vismal
