#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "vismal/clahe.hpp"
#include "vismal/classifier.hpp"
#include "vismal/converter.hpp"
#include "vismal/evaluation.hpp"

namespace vismal {

struct PipelineConfig {
  ClaheParams clahe;
  ClassifierConfig classifier;
  std::size_t folds = 10;
  std::uint64_t seed = 0x5eed;
  std::filesystem::path cache_dir = "vismal-cache";
  std::filesystem::path out_dir = "vismal-out";

  /// Sets one key from the flat key=value format. Throws ConfigError for
  /// unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);

  /// Propagates the shared seed and target size into the component configs
  /// and validates everything.
  void resolve();

  /// Canonical key=value text (every key, sorted).
  std::string to_text() const;

  /// Identity of every parameter that changes an enhanced image.
  std::string clahe_fingerprint() const;
};

/// Reads `key = value` lines; `#` starts a comment.
PipelineConfig load_config(const std::filesystem::path& path);
void apply_config_text(PipelineConfig& cfg, std::istream& in, const std::string& origin = "config");

struct FamilyEntry {
  std::string name;
  std::vector<std::filesystem::path> files;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<FamilyEntry> families;  // sorted by name
  std::vector<std::string> warnings;

  std::size_t total_files() const;
  std::vector<std::string> family_names() const;
};

/// A directory with one sub-directory per family, or a CSV file of
/// `path,label` rows (paths relative to the CSV's directory). Empty files are
/// skipped with a warning. Throws EmptyDataset when nothing usable remains.
DatasetManifest ingest(const std::filesystem::path& root);

std::string sha256_hex(std::span<const std::uint8_t> data);
std::string sha256_hex(const std::string& text);

struct CachedSample {
  std::filesystem::path source;
  std::size_t label = 0;
  std::string key;
  GrayImage image;  // target_size x target_size
};

struct PreprocessResult {
  std::vector<CachedSample> samples;  // manifest order
  std::size_t computed = 0;
  std::size_t cache_hits = 0;
  std::vector<std::string> failures;
};

/// Converts and enhances every manifest file, caching the enhanced PNGs in
/// cfg.cache_dir keyed by content hash and CLAHE parameters, with an
/// index.csv sidecar. Per-file failures are recorded; more than half failing
/// aborts with EmptyDataset.
PreprocessResult preprocess(const DatasetManifest& manifest, const PipelineConfig& cfg);

/// convert_bytes followed by enhance.
GrayImage extract_features(std::span<const std::uint8_t> bytes, const ClaheParams& params);

struct TrainOutcome {
  Model model;
  std::vector<EpochLog> log;
};

/// Trains on the whole manifest; class names and count come from the manifest.
TrainOutcome train_on_manifest(const DatasetManifest& manifest, const PipelineConfig& cfg);

struct FoldResult {
  std::size_t fold = 0;
  std::vector<std::size_t> test_indices;
  std::vector<EpochLog> log;
  std::filesystem::path model_path;
};

struct CrossvalResult {
  EvalReport report;
  MpeReport mpe;
  std::vector<FoldResult> folds;
  std::vector<std::size_t> fold_of;  // per sample
};

/// Stratified k-fold training and testing with a pooled confusion matrix.
/// Writes report.csv, report.txt, confusion.csv, folds.csv, fold_<k>.model,
/// fold_<k>_log.csv and mpe.csv into cfg.out_dir.
CrossvalResult run_crossval(const DatasetManifest& manifest, const PipelineConfig& cfg);

struct Classification {
  std::string family;
  std::size_t label = 0;
  std::vector<double> probabilities;
  double extraction_ms = 0.0;
  double classification_ms = 0.0;
};

/// End-to-end single-file classification. Timings cover compute only.
Classification classify_file(const std::filesystem::path& model_path,
                             const std::filesystem::path& binary_path, const PipelineConfig& cfg);
Classification classify_bytes(const Model& model, std::span<const std::uint8_t> bytes,
                              const ClaheParams& params);

struct VisualsResult {
  std::vector<std::filesystem::path> written;
  std::vector<std::string> errors;
};

/// Writes <family>/<hash>_raw.png and <hash>_clahe.png (equalized at source
/// resolution) for up to `per_family` files per family (0 = all).
VisualsResult emit_visuals(const DatasetManifest& manifest, const PipelineConfig& cfg,
                           const std::filesystem::path& out_dir, std::size_t per_family = 0);

/// Synthetic corpus: one directory per family, each file a family-specific
/// square-wave byte motif repeated with light noise. The default size range keeps every
/// file in the narrowest width bracket, so motif periods stay comparable
/// after resizing.
void write_toy_corpus(const std::filesystem::path& root, std::size_t families,
                      std::size_t per_family, std::uint64_t seed,
                      std::size_t min_bytes = 2048, std::size_t max_bytes = 10240);

}  // namespace vismal
