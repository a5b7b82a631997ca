#include "vismal/pipeline.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "vismal/error.hpp"
#include "vismal/random.hpp"

namespace vismal {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::uint64_t parse_uint(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(value, &used, 0);
    if (used != value.size() || value.front() == '-') throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + value + "'");
  }
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const auto v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + value + "'");
  }
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& value) {
  std::vector<std::size_t> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_uint(key, item));
  }
  return out;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string format_double(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

}  // namespace

void PipelineConfig::set(const std::string& raw_key, const std::string& raw_value) {
  const std::string key = trim(raw_key);
  const std::string value = trim(raw_value);
  auto& c = classifier;
  if (key == "clip_limit") clahe.clip_limit = parse_double(key, value);
  else if (key == "clip_limit_mode") {
    if (value == "normalized") clahe.clip_limit_mode = ClipLimitMode::kNormalized;
    else if (value == "raw") clahe.clip_limit_mode = ClipLimitMode::kRaw;
    else throw ConfigError("clip_limit_mode must be 'normalized' or 'raw'");
  } else if (key == "clip_mode") {
    if (value == "uniform") clahe.clip_mode = ClipMode::kUniform;
    else if (value == "paper-random" || value == "random") clahe.clip_mode = ClipMode::kPaperRandom;
    else throw ConfigError("clip_mode must be 'uniform' or 'paper-random'");
  } else if (key == "region_width") clahe.region_width = parse_uint(key, value);
  else if (key == "grid_b") clahe.grid_b = parse_uint(key, value);
  else if (key == "gray_levels") clahe.gray_levels = parse_uint(key, value);
  else if (key == "target_size") clahe.target_size = parse_uint(key, value);
  else if (key == "conv_filters" || key == "conv_kernels") {
    const auto list = parse_list(key, value);
    if (list.empty()) throw ConfigError(key + " must not be empty");
    if (c.conv.size() != list.size()) c.conv.resize(list.size(), c.conv.empty() ? ConvSpec{1, 1} : c.conv.back());
    for (std::size_t i = 0; i < list.size(); ++i) {
      (key == "conv_filters" ? c.conv[i].filters : c.conv[i].kernel) = list[i];
    }
  } else if (key == "pool_size") c.pool_size = parse_uint(key, value);
  else if (key == "pool_stride") c.pool_stride = parse_uint(key, value);
  else if (key == "dropout") c.dropout = parse_double(key, value);
  else if (key == "dense") c.dense = parse_list(key, value);
  else if (key == "l2") c.l2 = parse_double(key, value);
  else if (key == "learning_rate") c.learning_rate = parse_double(key, value);
  else if (key == "beta1") c.beta1 = parse_double(key, value);
  else if (key == "beta2") c.beta2 = parse_double(key, value);
  else if (key == "epsilon") c.epsilon = parse_double(key, value);
  else if (key == "batch_size") c.batch_size = parse_uint(key, value);
  else if (key == "epochs") c.epochs = parse_uint(key, value);
  else if (key == "early_stop_tol") c.early_stop_tol = parse_double(key, value);
  else if (key == "patience") c.patience = parse_uint(key, value);
  else if (key == "num_classes") c.num_classes = parse_uint(key, value);
  else if (key == "folds") folds = parse_uint(key, value);
  else if (key == "seed") seed = parse_uint(key, value);
  else if (key == "cache_dir") cache_dir = value;
  else if (key == "out_dir") out_dir = value;
  else throw ConfigError("unknown config key '" + key + "'");
}

void PipelineConfig::resolve() {
  clahe.seed = derive_seed(seed, 1);
  classifier.seed = derive_seed(seed, 2);
  classifier.input_width = clahe.target_size;
  classifier.input_height = clahe.target_size;
  clahe.validate();
  classifier.validate();
  if (folds < 2) throw ConfigError("folds must be >= 2");
}

std::string PipelineConfig::to_text() const {
  std::map<std::string, std::string> kv;
  std::vector<std::size_t> filters;
  std::vector<std::size_t> kernels;
  for (const auto& c : classifier.conv) {
    filters.push_back(c.filters);
    kernels.push_back(c.kernel);
  }
  kv["clip_limit"] = format_double(clahe.clip_limit);
  kv["clip_limit_mode"] = clahe.clip_limit_mode == ClipLimitMode::kNormalized ? "normalized" : "raw";
  kv["clip_mode"] = clahe.clip_mode == ClipMode::kUniform ? "uniform" : "paper-random";
  kv["region_width"] = std::to_string(clahe.region_width);
  kv["grid_b"] = std::to_string(clahe.grid_b);
  kv["gray_levels"] = std::to_string(clahe.gray_levels);
  kv["target_size"] = std::to_string(clahe.target_size);
  kv["conv_filters"] = join(filters);
  kv["conv_kernels"] = join(kernels);
  kv["pool_size"] = std::to_string(classifier.pool_size);
  kv["pool_stride"] = std::to_string(classifier.pool_stride);
  kv["dropout"] = format_double(classifier.dropout);
  kv["dense"] = join(classifier.dense);
  kv["l2"] = format_double(classifier.l2);
  kv["learning_rate"] = format_double(classifier.learning_rate);
  kv["beta1"] = format_double(classifier.beta1);
  kv["beta2"] = format_double(classifier.beta2);
  kv["epsilon"] = format_double(classifier.epsilon);
  kv["batch_size"] = std::to_string(classifier.batch_size);
  kv["epochs"] = std::to_string(classifier.epochs);
  kv["early_stop_tol"] = format_double(classifier.early_stop_tol);
  kv["patience"] = std::to_string(classifier.patience);
  kv["num_classes"] = std::to_string(classifier.num_classes);
  kv["folds"] = std::to_string(folds);
  kv["seed"] = std::to_string(seed);
  kv["cache_dir"] = cache_dir.string();
  kv["out_dir"] = out_dir.string();
  std::string text;
  for (const auto& [k, v] : kv) text += k + "=" + v + "\n";
  return text;
}

std::string PipelineConfig::clahe_fingerprint() const {
  std::ostringstream s;
  s << "region_width=" << clahe.region_width << ";grid_b=" << clahe.grid_b
    << ";clip_limit=" << format_double(clahe.clip_limit)
    << ";clip_limit_mode=" << static_cast<int>(clahe.clip_limit_mode)
    << ";clip_mode=" << static_cast<int>(clahe.clip_mode) << ";gray_levels=" << clahe.gray_levels
    << ";target_size=" << clahe.target_size;
  if (clahe.clip_mode == ClipMode::kPaperRandom) s << ";seed=" << clahe.seed;
  return s.str();
}

void apply_config_text(PipelineConfig& cfg, std::istream& in, const std::string& origin) {
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(number) + ": expected key = value");
    }
    cfg.set(line.substr(0, eq), line.substr(eq + 1));
  }
}

PipelineConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  PipelineConfig cfg;
  apply_config_text(cfg, in, path.string());
  return cfg;
}

// ---------------------------------------------------------------------------
// Dataset ingestion

std::size_t DatasetManifest::total_files() const {
  std::size_t n = 0;
  for (const auto& f : families) n += f.files.size();
  return n;
}

std::vector<std::string> DatasetManifest::family_names() const {
  std::vector<std::string> names;
  for (const auto& f : families) names.push_back(f.name);
  return names;
}

namespace {

void add_file(std::map<std::string, std::vector<fs::path>>& by_family, const std::string& family,
              const fs::path& file, std::vector<std::string>& warnings) {
  std::error_code ec;
  const auto size = fs::file_size(file, ec);
  if (ec) {
    warnings.push_back("unreadable file skipped: " + file.string());
    return;
  }
  if (size == 0) {
    warnings.push_back("empty file skipped: " + file.string());
    return;
  }
  by_family[family].push_back(file);
}

}  // namespace

DatasetManifest ingest(const fs::path& root) {
  DatasetManifest manifest;
  manifest.root = root;
  std::map<std::string, std::vector<fs::path>> by_family;
  std::error_code ec;
  if (fs::is_directory(root, ec)) {
    for (const auto& dir : fs::directory_iterator(root)) {
      if (!dir.is_directory()) continue;
      const std::string family = dir.path().filename().string();
      by_family.try_emplace(family);
      for (const auto& entry : fs::recursive_directory_iterator(dir.path())) {
        if (entry.is_regular_file()) add_file(by_family, family, entry.path(), manifest.warnings);
      }
    }
  } else if (fs::is_regular_file(root, ec)) {
    std::ifstream in(root);
    if (!in) throw IoError("cannot open manifest " + root.string());
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
      ++number;
      line = trim(line);
      if (line.empty() || line.front() == '#') continue;
      const auto comma = line.rfind(',');
      if (comma == std::string::npos) {
        throw FormatError(root.string() + ":" + std::to_string(number) + ": expected path,label");
      }
      const std::string path = trim(line.substr(0, comma));
      const std::string label = trim(line.substr(comma + 1));
      if (number == 1 && path == "path" && label == "label") continue;
      fs::path file = path;
      if (file.is_relative()) file = root.parent_path() / file;
      add_file(by_family, label, file, manifest.warnings);
    }
  } else {
    throw IoError("dataset root not found: " + root.string());
  }
  for (auto& [name, files] : by_family) {
    if (files.empty()) continue;
    std::sort(files.begin(), files.end());
    manifest.families.push_back({name, std::move(files)});
  }
  if (manifest.families.empty()) throw EmptyDataset("no usable files under " + root.string());
  return manifest;
}

// ---------------------------------------------------------------------------
// Preprocessing and cache

std::string sha256_hex(std::span<const std::uint8_t> data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw IoError("SHA-256 failed");
  }
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) {
    out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return out.str();
}

std::string sha256_hex(const std::string& text) {
  return sha256_hex(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()),
                                                  text.size()));
}

GrayImage extract_features(std::span<const std::uint8_t> bytes, const ClaheParams& params) {
  return enhance(convert_bytes(bytes), params);
}

namespace {

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

}  // namespace

PreprocessResult preprocess(const DatasetManifest& manifest, const PipelineConfig& cfg) {
  ensure_dir(cfg.cache_dir);
  const std::string fingerprint = cfg.clahe_fingerprint();
  PreprocessResult result;
  std::ostringstream index;
  index << "key,label,family,size,path\n";
  std::size_t attempted = 0;
  for (std::size_t label = 0; label < manifest.families.size(); ++label) {
    const auto& family = manifest.families[label];
    for (const auto& file : family.files) {
      ++attempted;
      try {
        const auto stream = read_byte_stream(file, family.name);
        const std::string key = sha256_hex(sha256_hex(stream.bytes) + "|" + fingerprint).substr(0, 40);
        const fs::path cached = cfg.cache_dir / (key + ".png");
        GrayImage image;
        bool hit = false;
        std::error_code ec;
        if (fs::exists(cached, ec)) {
          try {
            image = read_png(cached);
            hit = image.width() == cfg.clahe.target_size && image.height() == cfg.clahe.target_size;
          } catch (const Error&) {
            hit = false;
          }
        }
        if (hit) {
          ++result.cache_hits;
        } else {
          image = extract_features(stream.bytes, cfg.clahe);
          write_png(image, cached);
          ++result.computed;
        }
        index << key << ',' << label << ',' << csv_escape(family.name) << ','
              << cfg.clahe.target_size << ',' << csv_escape(file.string()) << '\n';
        result.samples.push_back({file, label, key, std::move(image)});
      } catch (const Error& e) {
        result.failures.push_back(file.string() + ": " + error_code_name(e.code()) + ": " + e.what());
      }
    }
  }
  if (result.failures.size() * 2 > attempted) {
    throw EmptyDataset("preprocessing failed for " + std::to_string(result.failures.size()) + " of " +
                       std::to_string(attempted) + " files; first: " + result.failures.front());
  }
  std::ofstream out(cfg.cache_dir / "index.csv", std::ios::trunc);
  if (!out) throw IoError("cannot write cache index in " + cfg.cache_dir.string());
  out << index.str();
  return result;
}

// ---------------------------------------------------------------------------
// Training and cross-validation

namespace {

ClassifierConfig classifier_for(const DatasetManifest& manifest, const PipelineConfig& cfg) {
  PipelineConfig resolved = cfg;
  resolved.classifier.num_classes = manifest.families.size();
  resolved.resolve();
  return resolved.classifier;
}

ClaheParams clahe_for(const PipelineConfig& cfg) {
  PipelineConfig resolved = cfg;
  resolved.resolve();
  return resolved.clahe;
}

template <typename Fn>
void write_file(const fs::path& path, Fn&& fn) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  fn(out);
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace

TrainOutcome train_on_manifest(const DatasetManifest& manifest, const PipelineConfig& cfg) {
  PipelineConfig resolved = cfg;
  resolved.classifier = classifier_for(manifest, cfg);
  resolved.clahe = clahe_for(cfg);
  const auto pre = preprocess(manifest, resolved);
  std::vector<LabeledSample> data;
  for (const auto& s : pre.samples) data.push_back({s.image, s.label});
  Model model = init_model<float>(resolved.classifier);
  model.class_names = manifest.family_names();
  auto trained = train(std::move(model), data);
  return {std::move(trained.model), std::move(trained.log)};
}

CrossvalResult run_crossval(const DatasetManifest& manifest, const PipelineConfig& cfg) {
  PipelineConfig resolved = cfg;
  resolved.classifier = classifier_for(manifest, cfg);
  resolved.clahe = clahe_for(cfg);
  ensure_dir(resolved.out_dir);

  const auto pre = preprocess(manifest, resolved);
  const auto names = manifest.family_names();
  std::vector<std::size_t> labels;
  for (const auto& s : pre.samples) labels.push_back(s.label);
  const auto folds = stratified_folds(labels, resolved.folds, derive_seed(resolved.seed, 3));

  CrossvalResult result;
  result.fold_of.assign(pre.samples.size(), 0);
  ConfusionMatrix pooled(names.size(), names);
  StageTimer extraction;
  StageTimer classification;
  std::size_t timed = 0;

  for (std::size_t f = 0; f < folds.size(); ++f) {
    FoldResult fold;
    fold.fold = f;
    fold.test_indices = folds[f];
    std::vector<bool> is_test(pre.samples.size(), false);
    for (auto i : folds[f]) {
      is_test[i] = true;
      result.fold_of[i] = f;
    }
    std::vector<LabeledSample> train_set;
    for (std::size_t i = 0; i < pre.samples.size(); ++i) {
      if (!is_test[i]) train_set.push_back({pre.samples[i].image, pre.samples[i].label});
    }
    if (train_set.empty() || folds[f].empty()) continue;

    ClassifierConfig fold_cfg = resolved.classifier;
    fold_cfg.seed = derive_seed(resolved.classifier.seed, f);
    Model model = init_model<float>(fold_cfg);
    model.class_names = names;
    TrainResult trained;
    try {
      trained = train(std::move(model), train_set);
    } catch (const Error& e) {
      throw Error(e.code(), "fold " + std::to_string(f) + ": " + e.what());
    }
    fold.log = trained.log;

    for (auto i : folds[f]) {
      const auto stream = read_byte_stream(pre.samples[i].source);
      const GrayImage features =
          extraction.time([&] { return extract_features(stream.bytes, resolved.clahe); });
      const Prediction p = classification.time([&] { return predict(trained.model, features); });
      pooled.add(pre.samples[i].label, p.label);
      ++timed;
    }

    fold.model_path = resolved.out_dir / ("fold_" + std::to_string(f) + ".model");
    save_model(trained.model, fold.model_path);
    write_file(resolved.out_dir / ("fold_" + std::to_string(f) + "_log.csv"),
               [&](std::ostream& out) { write_training_log_csv(fold.log, out); });
    result.folds.push_back(std::move(fold));
  }

  result.report = weighted_report(pooled);
  result.mpe = measure_mpe(extraction.total_ms(), classification.total_ms(), std::max<std::size_t>(timed, 1));
  result.mpe.num_files = timed;

  write_file(resolved.out_dir / "report.csv", [&](std::ostream& out) { write_report_csv(result.report, out); });
  write_file(resolved.out_dir / "report.txt", [&](std::ostream& out) { write_report_text(result.report, out); });
  write_file(resolved.out_dir / "confusion.csv", [&](std::ostream& out) { write_confusion_csv(pooled, out); });
  write_file(resolved.out_dir / "folds.csv", [&](std::ostream& out) {
    out << "index,fold,label,family,path\n";
    for (std::size_t i = 0; i < pre.samples.size(); ++i) {
      out << i << ',' << result.fold_of[i] << ',' << pre.samples[i].label << ','
          << csv_escape(names[pre.samples[i].label]) << ',' << csv_escape(pre.samples[i].source.string())
          << '\n';
    }
  });
  write_file(resolved.out_dir / "mpe.csv", [&](std::ostream& out) { write_mpe_csv(result.mpe, out); });
  return result;
}

// ---------------------------------------------------------------------------
// Single-file classification and visuals

Classification classify_bytes(const Model& model, std::span<const std::uint8_t> bytes,
                              const ClaheParams& params) {
  if (bytes.empty()) throw EmptyInput("input file is empty");
  if (params.target_size != model.config.input_width || params.target_size != model.config.input_height) {
    throw ConfigError("target_size " + std::to_string(params.target_size) +
                      " does not match the model input size");
  }
  StageTimer extraction;
  StageTimer classification;
  const GrayImage features = extraction.time([&] { return extract_features(bytes, params); });
  const Prediction p = classification.time([&] { return predict(model, features); });
  Classification c;
  c.label = p.label;
  c.probabilities = p.probabilities;
  c.family = p.label < model.class_names.size() ? model.class_names[p.label]
                                                : "class_" + std::to_string(p.label);
  c.extraction_ms = extraction.total_ms();
  c.classification_ms = classification.total_ms();
  return c;
}

Classification classify_file(const fs::path& model_path, const fs::path& binary_path,
                             const PipelineConfig& cfg) {
  const Model model = load_model(model_path);
  const auto stream = read_byte_stream(binary_path);
  return classify_bytes(model, stream.bytes, clahe_for(cfg));
}

VisualsResult emit_visuals(const DatasetManifest& manifest, const PipelineConfig& cfg,
                           const fs::path& out_dir, std::size_t per_family) {
  const ClaheParams params = clahe_for(cfg);
  VisualsResult result;
  for (const auto& family : manifest.families) {
    const fs::path dir = out_dir / family.name;
    std::size_t done = 0;
    for (const auto& file : family.files) {
      if (per_family && done >= per_family) break;
      try {
        ensure_dir(dir);
        const auto stream = read_byte_stream(file);
        const std::string stem = sha256_hex(stream.bytes).substr(0, 16);
        const GrayImage raw = convert_bytes(stream.bytes);
        const GrayImage enhanced = equalize(raw, params);
        write_png(raw, dir / (stem + "_raw.png"));
        write_png(enhanced, dir / (stem + "_clahe.png"));
        result.written.push_back(dir / (stem + "_raw.png"));
        result.written.push_back(dir / (stem + "_clahe.png"));
        ++done;
      } catch (const Error& e) {
        result.errors.push_back(file.string() + ": " + e.what());
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------

void write_toy_corpus(const fs::path& root, std::size_t families, std::size_t per_family,
                      std::uint64_t seed, std::size_t min_bytes, std::size_t max_bytes) {
  if (families == 0 || per_family == 0) throw ConfigError("toy corpus needs families and files");
  if (min_bytes == 0 || max_bytes < min_bytes) throw ConfigError("invalid toy corpus size range");
  for (std::size_t f = 0; f < families; ++f) {
    Rng family_rng(derive_seed(seed, f));
    // Motif lengths divide every image width, so each family shows up as
    // vertical stripes of its own period. Each motif is a square wave
    // between two family levels with a little jitter.
    const std::size_t motif_len = std::size_t{32} >> (f % 5);
    const std::uint64_t lo = 16 + uniform_index(family_rng, 64);
    const std::uint64_t hi = 176 + uniform_index(family_rng, 64);
    std::vector<std::uint8_t> motif(motif_len);
    for (std::size_t k = 0; k < motif_len; ++k) {
      motif[k] = static_cast<std::uint8_t>((k < motif_len / 2 ? hi : lo) + uniform_index(family_rng, 16));
    }

    char name[32];
    std::snprintf(name, sizeof name, "family_%02zu", f);
    const fs::path dir = root / name;
    ensure_dir(dir);
    for (std::size_t i = 0; i < per_family; ++i) {
      Rng rng(derive_seed(derive_seed(seed, f), 1000 + i));
      const std::size_t len = min_bytes + uniform_index(rng, max_bytes - min_bytes + 1);
      const std::size_t offset = uniform_index(rng, motif_len);
      std::vector<std::uint8_t> bytes(len);
      for (std::size_t k = 0; k < len; ++k) {
        bytes[k] = uniform_index(rng, 50) == 0 ? static_cast<std::uint8_t>(uniform_index(rng, 256))
                                               : motif[(k + offset) % motif_len];
      }
      char file[32];
      std::snprintf(file, sizeof file, "sample_%04zu.bin", i);
      std::ofstream out(dir / file, std::ios::binary | std::ios::trunc);
      if (!out) throw IoError("cannot write toy sample in " + dir.string());
      out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }
  }
}

}  // namespace vismal
