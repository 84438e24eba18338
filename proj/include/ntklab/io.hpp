#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ntklab/data.hpp"
#include "ntklab/model.hpp"

namespace ntklab {

/// Decimal with 17 significant digits; parses back to the same double.
std::string cell(double v);
std::string cell(Index v);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  /// Emitted after the rows as "# <line>".
  std::vector<std::string> footer;

  std::string render() const;
  /// Column index by name; throws InvalidInput if absent.
  std::size_t column(const std::string& name) const;
};

/// Parses render() output. Lines starting with '#' go to footer.
CsvTable parse_csv(const std::string& text);
CsvTable read_csv(const std::filesystem::path& path);

/// Dense kernel with a header row of sample indices.
CsvTable kernel_table(const Matrix& K);

/// Writes to a sibling temporary file, then renames over the target.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Header line, shape line, then one value per line in flatten() order.
std::string serialize_params(const ModelParams& params);
ModelParams parse_params(const std::string& text);

/// Header line, "N d_s d C_x seed", each sample's rows, then the targets.
std::string serialize_dataset(const Dataset& data);
Dataset parse_dataset(const std::string& text);

}  // namespace ntklab
