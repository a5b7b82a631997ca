// vismal: byte-image malware family classification.
//
//   vismal convert    <binary>            -> grayscale PNG
//   vismal enhance    <binary|png>        -> equalized (and resized) PNG
//   vismal train      <dataset>           -> model + training log
//   vismal crossval   <dataset>           -> k-fold report, confusion, models
//   vismal classify   <model> <binary>    -> family, confidence, timings
//   vismal visualize  <dataset>           -> raw/equalized PNG gallery
//   vismal report     <confusion.csv>     -> metrics table

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

#include "vismal/error.hpp"
#include "vismal/pipeline.hpp"

namespace fs = std::filesystem;
using namespace vismal;

namespace {

constexpr int kUsageExit = 64;

struct GlobalOptions {
  std::string config;
  std::optional<std::string> seed;
  std::optional<std::string> clip_limit;
  std::optional<std::string> clip_mode;
  std::optional<std::string> grid_b;
  std::optional<std::string> region_width;
  std::optional<std::string> target_size;
  std::optional<std::string> pool_stride;
  std::optional<std::string> folds;
  std::optional<std::string> out;
  std::vector<std::string> sets;
};

PipelineConfig build_config(const GlobalOptions& g) {
  PipelineConfig cfg = g.config.empty() ? PipelineConfig{} : load_config(g.config);
  auto apply = [&](const char* key, const std::optional<std::string>& v) {
    if (v) cfg.set(key, *v);
  };
  apply("seed", g.seed);
  apply("clip_limit", g.clip_limit);
  apply("clip_mode", g.clip_mode);
  apply("grid_b", g.grid_b);
  apply("region_width", g.region_width);
  apply("target_size", g.target_size);
  apply("pool_stride", g.pool_stride);
  apply("folds", g.folds);
  apply("out_dir", g.out);
  for (const auto& kv : g.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got " + kv);
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

ClaheParams resolved_clahe(PipelineConfig cfg) {
  cfg.resolve();
  return cfg.clahe;
}

template <typename Fn>
void write_text(const fs::path& path, Fn&& fn) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  fn(out);
}

fs::path default_output(const fs::path& input, const std::string& suffix) {
  return fs::path(input.filename().string() + suffix);
}

GrayImage load_as_image(const fs::path& input) {
  std::ifstream in(input, std::ios::binary);
  char sig[8] = {};
  in.read(sig, 8);
  if (in.gcount() == 8 && static_cast<unsigned char>(sig[0]) == 0x89 && sig[1] == 'P' &&
      sig[2] == 'N' && sig[3] == 'G') {
    return read_png(input);
  }
  return convert_bytes(read_byte_stream(input).bytes);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vismal - classify executables by their byte images"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalOptions g;
  app.add_option("--config", g.config, "flat key=value config file");
  app.add_option("--seed", g.seed, "master seed");
  app.add_option("--clip-limit", g.clip_limit, "histogram clip limit");
  app.add_option("--clip-mode", g.clip_mode, "uniform | paper-random");
  app.add_option("--grid-b", g.grid_b, "vertical region count");
  app.add_option("--region-width", g.region_width, "region width in pixels");
  app.add_option("--target-size", g.target_size, "side of the resized classifier input");
  app.add_option("--pool-stride", g.pool_stride, "max-pool stride");
  app.add_option("--folds", g.folds, "cross-validation fold count");
  app.add_option("--out", g.out, "output file or directory");
  app.add_option("--set", g.sets, "any config key as key=value (repeatable)");

  std::string input;
  std::string second;
  std::string dump_mappings;
  bool no_resize = false;
  std::size_t per_family = 0;

  auto* convert = app.add_subcommand("convert", "binary file -> grayscale PNG");
  convert->add_option("input", input, "binary file")->required();

  auto* enhance_cmd = app.add_subcommand("enhance", "equalize a binary or grayscale PNG");
  enhance_cmd->add_option("input", input, "binary file or 8-bit grayscale PNG")->required();
  enhance_cmd->add_flag("--no-resize", no_resize, "keep the source resolution");
  enhance_cmd->add_option("--dump-mappings", dump_mappings, "write per-region mapping tables as CSV");

  auto* train_cmd = app.add_subcommand("train", "train a model on a dataset");
  train_cmd->add_option("dataset", input, "family-per-directory root or path,label CSV")->required();

  auto* crossval = app.add_subcommand("crossval", "stratified k-fold evaluation");
  crossval->add_option("dataset", input, "family-per-directory root or path,label CSV")->required();

  auto* classify = app.add_subcommand("classify", "classify one binary");
  classify->add_option("model", input, "model file")->required();
  classify->add_option("binary", second, "binary file")->required();

  auto* visualize = app.add_subcommand("visualize", "write raw and equalized PNGs per family");
  visualize->add_option("dataset", input, "family-per-directory root or path,label CSV")->required();
  visualize->add_option("--per-family", per_family, "files per family (0 = all)");

  auto* report = app.add_subcommand("report", "metrics from a confusion matrix CSV");
  report->add_option("confusion", input, "confusion CSV as written by crossval")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kUsageExit;
  }

  try {
    PipelineConfig cfg = build_config(g);

    if (*convert) {
      const auto img = convert_bytes(read_byte_stream(input).bytes);
      const fs::path out = g.out ? fs::path(*g.out) : default_output(input, ".png");
      write_png(img, out);
      std::cout << out.string() << ' ' << img.width() << 'x' << img.height() << '\n';
    } else if (*enhance_cmd) {
      const ClaheParams params = resolved_clahe(cfg);
      const GrayImage src = load_as_image(input);
      RegionGrid grid;
      GrayImage img = equalize(src, params, &grid);
      if (!no_resize) img = resize(img, params.target_size);
      const fs::path out = g.out ? fs::path(*g.out) : default_output(input, ".clahe.png");
      write_png(img, out);
      if (!dump_mappings.empty()) {
        write_text(dump_mappings, [&](std::ostream& o) { write_mapping_csv(grid, o); });
      }
      std::cout << out.string() << ' ' << img.width() << 'x' << img.height() << " regions "
                << grid.cols << 'x' << grid.rows << '\n';
    } else if (*train_cmd) {
      const auto manifest = ingest(input);
      for (const auto& w : manifest.warnings) std::cerr << "warning: " << w << '\n';
      const auto outcome = train_on_manifest(manifest, cfg);
      fs::create_directories(cfg.out_dir);
      save_model(outcome.model, cfg.out_dir / "model.vismal");
      write_text(cfg.out_dir / "train_log.csv",
                 [&](std::ostream& o) { write_training_log_csv(outcome.log, o); });
      std::cout << "model: " << (cfg.out_dir / "model.vismal").string() << " ("
                << outcome.model.class_names.size() << " families, " << outcome.log.size()
                << " epochs)\n";
    } else if (*crossval) {
      const auto manifest = ingest(input);
      for (const auto& w : manifest.warnings) std::cerr << "warning: " << w << '\n';
      const auto result = run_crossval(manifest, cfg);
      write_report_text(result.report, std::cout);
      std::cout << std::fixed << std::setprecision(3) << "MPE: extraction " << result.mpe.extraction_ms
                << " ms + classification " << result.mpe.classification_ms << " ms = "
                << result.mpe.total_ms << " ms per sample\n"
                << "outputs in " << cfg.out_dir.string() << '\n';
    } else if (*classify) {
      const auto c = classify_file(input, second, cfg);
      std::cout << "family: " << c.family << '\n'
                << std::fixed << std::setprecision(4) << "confidence: " << c.probabilities[c.label]
                << '\n'
                << std::setprecision(3) << "extraction_ms: " << c.extraction_ms << '\n'
                << "classification_ms: " << c.classification_ms << '\n'
                << "total_ms: " << c.extraction_ms + c.classification_ms << '\n';
    } else if (*visualize) {
      const auto manifest = ingest(input);
      const auto result = emit_visuals(manifest, cfg, cfg.out_dir, per_family);
      for (const auto& e : result.errors) std::cerr << "error: " << e << '\n';
      std::cout << result.written.size() << " images written to " << cfg.out_dir.string() << '\n';
    } else if (*report) {
      std::ifstream in(input);
      if (!in) throw IoError("cannot open " + input);
      const auto rep = weighted_report(read_confusion_csv(in));
      write_report_text(rep, std::cout);
      if (g.out) {
        fs::create_directories(cfg.out_dir);
        write_text(cfg.out_dir / "report.csv", [&](std::ostream& o) { write_report_csv(rep, o); });
      }
    }
  } catch (const Error& e) {
    std::cerr << "vismal: " << error_code_name(e.code()) << ": " << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "vismal: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
