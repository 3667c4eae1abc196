#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace lbd {

// Fixed-header CSV table. Cell text is produced by the caller; floats go
// through format_double so reruns are byte-identical and values round-trip.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

// 17 significant digits: enough for exact double round-trips.
std::string format_double(double v);

// Writes to a temp file in the target directory, then renames into place.
void write_csv_atomic(const CsvTable& table, const std::filesystem::path& path);

struct RunRecord {
  int schema_version = 1;
  std::map<std::string, std::string> config;
  std::map<std::string, double> metrics;
  std::map<std::string, std::string> metadata;  // free-form run notes
  std::vector<std::map<std::string, double>> epochs;
  double wall_seconds = 0.0;
  std::string library_version;
  std::string git_hash;

  bool operator==(const RunRecord&) const = default;
};

std::string library_version();
std::string build_git_hash();
RunRecord make_run_record();  // version and git hash prefilled

void write_run_record(const RunRecord& record, const std::filesystem::path& path);
RunRecord read_run_record(const std::filesystem::path& path);

}  // namespace lbd
