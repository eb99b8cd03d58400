#pragma once

#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "run_config.hpp"

namespace subnetscope::cli {

/// A downstream stage found no output from the stage it depends on.
class MissingArtifactError : public std::runtime_error {
 public:
  explicit MissingArtifactError(const std::filesystem::path& file)
      : std::runtime_error("missing upstream artifact " + file.string()), file_(file) {}
  const std::filesystem::path& file() const { return file_; }

 private:
  std::filesystem::path file_;
};

/// Stage names in pipeline order.
const std::vector<std::string>& stage_names();

/// Runs one stage and records it in <output>/manifest.json.
void run_stage(const std::string& name, const RunConfig& config);

/// Every stage in order.
void run_pipeline(const RunConfig& config);

/// Runs fn(0..n-1) on up to `workers` threads. Results must be written by
/// index; the first failing job (lowest index) is rethrown after all finish.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

/// Lowercase hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

/// Exit status for an exception escaping a stage: 1 config, 2 missing artifact, 3 anything else.
int exit_code_for(const std::exception& e);

std::string version();

}  // namespace subnetscope::cli
