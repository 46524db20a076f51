#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "coilwatch/config.hpp"

namespace coilwatch::testing {

/// A pipeline run small enough to repeat many times: 48 coils, 3 folds,
/// one training epoch, cnn1 as the only CNN.
inline RunConfig tiny_config(std::uint64_t seed) {
  RunConfig c;
  c.seed = seed;
  c.synthetic.coils = 48;
  c.synthetic.broken_fraction = 0.25;
  c.synthetic.noise_samples = 24;
  c.synthetic.seed = seed;
  c.cv.folds = 3;
  c.fcn.hidden = {8, 8, 8, 8};
  c.fcn.train.max_epochs = 1;
  c.fcn.train.batch_size = 32;
  c.cnn.variants = {CnnVariant::cnn1};
  c.cnn.stacked = CnnVariant::cnn1;
  c.cnn.train.max_epochs = 1;
  c.cnn.train.batch_size = 16;
  c.meta.forest.tree_count = 5;
  c.meta.pooled = true;
  return c;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

/// Runs the command-line tool with `args` (output discarded) and returns its exit code.
inline int run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + COILWATCH_CLI + "\" " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace coilwatch::testing
