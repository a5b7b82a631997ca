// Writes a synthetic family-per-directory corpus for demos and tests.

#include <CLI11.hpp>

#include <iostream>

#include "vismal/error.hpp"
#include "vismal/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"generate a synthetic byte-motif corpus"};
  std::string root;
  std::size_t families = 4;
  std::size_t per_family = 50;
  std::uint64_t seed = 7;
  std::size_t min_bytes = 2048;
  std::size_t max_bytes = 10240;
  app.add_option("root", root, "output directory")->required();
  app.add_option("--families", families, "family count");
  app.add_option("--per-family", per_family, "files per family");
  app.add_option("--seed", seed, "generator seed");
  app.add_option("--min-bytes", min_bytes, "smallest file size");
  app.add_option("--max-bytes", max_bytes, "largest file size");
  CLI11_PARSE(app, argc, argv);
  try {
    vismal::write_toy_corpus(root, families, per_family, seed, min_bytes, max_bytes);
  } catch (const vismal::Error& e) {
    std::cerr << e.what() << '\n';
    return static_cast<int>(e.code());
  }
  std::cout << families * per_family << " files written to " << root << '\n';
  return 0;
}
