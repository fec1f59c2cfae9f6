#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "nvnmr/config.hpp"

namespace nvnmr::cli {

struct RunOptions {
  std::filesystem::path out = "out";
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
};

/// Files produced by a command, relative to the output directory.
struct Outputs {
  std::filesystem::path root;
  std::vector<std::filesystem::path> files;

  std::filesystem::path add(const std::filesystem::path& relative);
  void add_absolute(const std::filesystem::path& absolute);
};

/// Exit codes: 0 success, 1 failed tolerance / non-convergence, 2 bad input.
int cmd_simulate(const Config& config, const RunOptions& options, Outputs& outputs, std::ostream& log);
int cmd_fit(const Config& config, const RunOptions& options, Outputs& outputs, std::ostream& log);
int cmd_image(const Config& config, const RunOptions& options, Outputs& outputs, std::ostream& log);
int cmd_verify(const Config& config, const RunOptions& options, Outputs& outputs, std::ostream& log);

/// Runs one subcommand, then writes resolved_config.json and manifest.json
/// (SHA-256 of every output) into options.out. Timestamps go to run.log only.
int run(const std::string& command, const Config& config, const RunOptions& options, std::ostream& log,
        std::ostream& err);

std::string sha256_file(const std::filesystem::path& path);

/// Command-line entry point.
int main(int argc, char** argv);

}  // namespace nvnmr::cli
