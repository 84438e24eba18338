#include "ntklab/io.hpp"

#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <openssl/evp.h>

#include "ntklab/grad.hpp"

namespace ntklab {

std::string cell(double v) { return fmt::format("{:.17g}", v); }

std::string cell(Index v) { return fmt::format("{}", v); }

namespace {

std::string join(const std::vector<std::string>& parts) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += ',';
    out += parts[i];
  }
  return out;
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(line);
  while (std::getline(in, item, ',')) out.push_back(item);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, const char* what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw InvalidInput(fmt::format("{}: cannot parse '{}' as a number", what, s));
  }
}

}  // namespace

std::string CsvTable::render() const {
  std::string out = join(header) + '\n';
  for (const auto& r : rows) out += join(r) + '\n';
  for (const auto& f : footer) out += "# " + f + '\n';
  return out;
}

std::size_t CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return i;
  throw InvalidInput(fmt::format("csv: no column named '{}'", name));
}

CsvTable parse_csv(const std::string& text) {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  bool have_header = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("# ", 0) == 0) {
      t.footer.push_back(line.substr(2));
    } else if (!have_header) {
      t.header = split(line);
      have_header = true;
    } else {
      t.rows.push_back(split(line));
    }
  }
  return t;
}

CsvTable read_csv(const std::filesystem::path& path) { return parse_csv(read_file(path)); }

CsvTable kernel_table(const Matrix& K) {
  CsvTable t;
  for (Index j = 0; j < K.cols(); ++j) t.header.push_back(cell(j));
  for (Index i = 0; i < K.rows(); ++i) {
    std::vector<std::string> r;
    for (Index j = 0; j < K.cols(); ++j) r.push_back(cell(K(i, j)));
    t.rows.push_back(std::move(r));
  }
  return t;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError(fmt::format("cannot open {} for writing", tmp.string()));
    out << content;
    out.flush();
    if (!out) throw ConfigError(fmt::format("write to {} failed", tmp.string()));
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(fmt::format("cannot open {}", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", digest[i]);
  return hex;
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

std::string serialize_params(const ModelParams& params) {
  std::string out = "ntklab-params 1\n";
  out += fmt::format("{} {}\n", params.d_m(), params.d());
  const Vector flat = flatten(params);
  for (Index j = 0; j < flat.size(); ++j) out += cell(flat(j)) + '\n';
  return out;
}

ModelParams parse_params(const std::string& text) {
  std::istringstream in(text);
  std::string magic;
  int version = 0;
  in >> magic >> version;
  if (magic != "ntklab-params" || version != 1) throw InvalidInput("params file: bad header");
  Index d_m = 0, d = 0;
  in >> d_m >> d;
  if (!in || d_m < 1 || d < 1) throw InvalidInput("params file: bad shape line");
  const Dims dims{1, 1, d, d_m};
  Vector flat(dims.param_count());
  std::string token;
  for (Index j = 0; j < flat.size(); ++j) {
    if (!(in >> token)) throw InvalidInput("params file: truncated body");
    flat(j) = parse_double(token, "params file");
  }
  if (in >> token) throw InvalidInput("params file: trailing data");
  return unflatten(flat, dims);
}

std::string serialize_dataset(const Dataset& data) {
  data.validate();
  std::string out = "ntklab-dataset 1\n";
  out += fmt::format("{} {} {} {} {}\n", data.N(), data.d_s(), data.d(), cell(data.C_x), data.seed);
  for (const Matrix& x : data.inputs) {
    for (Index i = 0; i < x.rows(); ++i) {
      std::vector<std::string> r;
      for (Index j = 0; j < x.cols(); ++j) r.push_back(cell(x(i, j)));
      out += join(r) + '\n';
    }
  }
  for (Index n = 0; n < data.N(); ++n) out += cell(data.targets(n)) + '\n';
  return out;
}

Dataset parse_dataset(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "ntklab-dataset 1") throw InvalidInput("dataset file: bad header");
  Index N = 0, d_s = 0, d = 0;
  std::string cx;
  Dataset data;
  if (!std::getline(in, line)) throw InvalidInput("dataset file: missing shape line");
  {
    std::istringstream shape(line);
    shape >> N >> d_s >> d >> cx >> data.seed;
    if (!shape || N < 1 || d_s < 1 || d < 1) throw InvalidInput("dataset file: bad shape line");
  }
  data.C_x = parse_double(cx, "dataset file");
  for (Index n = 0; n < N; ++n) {
    Matrix x(d_s, d);
    for (Index i = 0; i < d_s; ++i) {
      if (!std::getline(in, line)) throw InvalidInput("dataset file: truncated inputs");
      const auto parts = split(line);
      if (static_cast<Index>(parts.size()) != d) throw InvalidInput("dataset file: wrong row length");
      for (Index j = 0; j < d; ++j) x(i, j) = parse_double(parts[static_cast<std::size_t>(j)], "dataset file");
    }
    data.inputs.push_back(std::move(x));
  }
  data.targets.resize(N);
  for (Index n = 0; n < N; ++n) {
    if (!std::getline(in, line)) throw InvalidInput("dataset file: truncated targets");
    data.targets(n) = parse_double(line, "dataset file");
  }
  data.validate();
  if (!data.satisfies_bound()) throw InvalidInput("dataset file: inputs exceed the stated C_x bound");
  return data;
}

}  // namespace ntklab
