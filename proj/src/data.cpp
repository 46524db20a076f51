#include "coilwatch/data.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include "coilwatch/error.hpp"
#include "coilwatch/random.hpp"

namespace coilwatch {

std::string_view to_string(Label label) { return label == Label::broken ? "broken" : "normal"; }

std::string_view to_string(Provenance provenance) {
  return provenance == Provenance::augmented ? "augmented" : "measured";
}

Label parse_label(std::string_view text) {
  if (text == "normal") return Label::normal;
  if (text == "broken") return Label::broken;
  throw ContractViolation("unknown label '" + std::string(text) + "' (expected normal or broken)");
}

Provenance parse_provenance(std::string_view text) {
  if (text == "measured") return Provenance::measured;
  if (text == "augmented") return Provenance::augmented;
  throw ContractViolation("unknown provenance '" + std::string(text) + "' (expected measured or augmented)");
}

// ---------------------------------------------------------------------------
// SquareMatrix

SquareMatrix::SquareMatrix(std::size_t order, double fill) : order_(order), values_(order * order, fill) {}

SquareMatrix::SquareMatrix(std::size_t order, std::vector<double> values)
    : order_(order), values_(std::move(values)) {
  if (values_.size() != order * order) {
    throw DimensionError("square matrix of order " + std::to_string(order) + " needs " +
                         std::to_string(order * order) + " values, got " + std::to_string(values_.size()));
  }
}

SquareMatrix SquareMatrix::identity(std::size_t order) {
  SquareMatrix m(order, 0.0);
  for (std::size_t i = 0; i < order; ++i) m(i, i) = 1.0;
  return m;
}

double SquareMatrix::trace() const {
  double t = 0.0;
  for (std::size_t i = 0; i < order_; ++i) t += (*this)(i, i);
  return t;
}

double SquareMatrix::frobenius_norm() const {
  double s = 0.0;
  for (double v : values_) s += v * v;
  return std::sqrt(s);
}

double SquareMatrix::max_abs() const {
  double m = 0.0;
  for (double v : values_) m = std::max(m, std::abs(v));
  return m;
}

std::vector<double> symmetric_eigenvalues(const SquareMatrix& m) {
  const auto n = static_cast<Eigen::Index>(m.order());
  Eigen::MatrixXd dense(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) dense(i, j) = m(i, j);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(dense, Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) throw ValidationError("eigenvalue decomposition did not converge");
  std::vector<double> out(solver.eigenvalues().data(), solver.eigenvalues().data() + n);
  return out;
}

void validate_ncm(const SquareMatrix& m, const std::string& context) {
  const std::size_t n = m.order();
  if (n == 0) throw ValidationError(context + ": empty matrix");
  const double scale = m.max_abs();
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(m(i, i))) throw ValidationError(context + ": non-finite entry on the diagonal");
    if (m(i, i) < 0.0) {
      throw ValidationError(context + ": negative diagonal entry " + format_real(m(i, i)) + " at (" +
                            std::to_string(i) + "," + std::to_string(i) + ")");
    }
    for (std::size_t j = i + 1; j < n; ++j) {
      if (!std::isfinite(m(i, j)) || !std::isfinite(m(j, i))) throw ValidationError(context + ": non-finite entry");
      if (std::abs(m(i, j) - m(j, i)) > NcmTolerance::kSymmetry * scale) {
        throw ValidationError(context + ": not symmetric at (" + std::to_string(i) + "," + std::to_string(j) +
                              "): " + format_real(m(i, j)) + " vs " + format_real(m(j, i)));
      }
    }
  }
  const auto eig = symmetric_eigenvalues(m);
  const double top = std::max(std::abs(eig.back()), std::abs(eig.front()));
  if (eig.front() < -NcmTolerance::kEigenvalue * top) {
    throw ValidationError(context + ": not positive semidefinite (min eigenvalue " + format_real(eig.front()) + ")");
  }
}

// ---------------------------------------------------------------------------
// Dataset

std::map<std::string, CoilRecords> Dataset::coils() const {
  std::map<std::string, CoilRecords> out;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    CoilRecords& rec = out[channels[i].coil_id];
    rec.channel_rows.push_back(i);
    if (channels[i].label == Label::broken) rec.label = Label::broken;
  }
  for (std::size_t i = 0; i < ncms.size(); ++i) {
    CoilRecords& rec = out[ncms[i].coil_id];
    rec.ncm_rows.push_back(i);
    if (ncms[i].label == Label::broken) rec.label = Label::broken;
  }
  return out;
}

void Dataset::validate_channel_events() const {
  std::map<std::pair<std::string, std::size_t>, std::vector<std::size_t>> events;
  for (const auto& row : channels) events[{row.coil_id, row.measurement}].push_back(row.channel_index);
  for (auto& [key, indices] : events) {
    std::sort(indices.begin(), indices.end());
    bool complete = indices.size() == kChannelsPerCoil;
    for (std::size_t i = 0; complete && i < kChannelsPerCoil; ++i) complete = indices[i] == i;
    if (!complete) {
      throw ValidationError("coil '" + key.first + "' measurement " + std::to_string(key.second) + " has " +
                            std::to_string(indices.size()) + " channel rows; expected each of the " +
                            std::to_string(kChannelsPerCoil) + " channels exactly once");
    }
  }
}

// ---------------------------------------------------------------------------
// Synthetic generator

void SyntheticSpec::validate() const {
  if (coils == 0) throw ContractViolation("synthetic spec: coil count must be positive");
  if (measurements_per_coil == 0) throw ContractViolation("synthetic spec: measurements per coil must be positive");
  if (noise_samples < 2) throw ContractViolation("synthetic spec: need at least 2 noise samples per matrix");
  auto fraction = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) throw ContractViolation(std::string("synthetic spec: ") + name + " must lie in [0, 1]");
  };
  fraction(broken_fraction, "broken fraction");
  fraction(channel_event_fraction, "channel event fraction");
  fraction(ncm_coupling, "NCM coupling");
  fraction(neighbor_effect, "neighbor effect");
  if (min_broken_channels == 0 || min_broken_channels > max_broken_channels || max_broken_channels > kChannelsPerCoil) {
    throw ContractViolation("synthetic spec: broken channel range must satisfy 1 <= min <= max <= 20");
  }
  if (!(broken_variance_multiplier >= 1.0)) {
    throw ContractViolation("synthetic spec: broken variance multiplier must be >= 1");
  }
}

namespace {

std::string coil_name(std::size_t index, std::size_t total) {
  const std::size_t width = std::max<std::size_t>(4, std::to_string(total - 1).size());
  std::string digits = std::to_string(index);
  return "coil-" + std::string(width - digits.size(), '0') + digits;
}

std::size_t ring_neighbor(std::size_t channel, int offset) {
  return (channel + kChannelsPerCoil + offset) % kChannelsPerCoil;
}

}  // namespace

Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  constexpr std::size_t C = kChannelsPerCoil;
  Dataset out;
  out.ncms.reserve(spec.coils * spec.measurements_per_coil);
  out.channels.reserve(spec.coils * spec.measurements_per_coil * C);

  for (std::size_t coil = 0; coil < spec.coils; ++coil) {
    std::mt19937_64 rng(mix_seed(spec.seed, coil));
    const std::string id = coil_name(coil, spec.coils);

    const bool coil_broken = uniform01(rng) < spec.broken_fraction;
    std::array<bool, C> broken{};
    std::array<double, C> neighbor_weight{};
    if (coil_broken) {
      const std::size_t span = spec.max_broken_channels - spec.min_broken_channels + 1;
      const std::size_t count = spec.min_broken_channels + uniform_index(rng, span);
      std::vector<std::size_t> order(C);
      for (std::size_t c = 0; c < C; ++c) order[c] = c;
      shuffle(order, rng);
      for (std::size_t k = 0; k < count; ++k) broken[order[k]] = true;
      for (std::size_t c = 0; c < C; ++c) {
        if (!broken[c]) continue;
        for (int offset : {-1, 1}) {
          const std::size_t nb = ring_neighbor(c, offset);
          if (!broken[nb]) neighbor_weight[nb] = std::max(neighbor_weight[nb], spec.neighbor_effect);
        }
      }
    }
    const Label coil_label = coil_broken ? Label::broken : Label::normal;

    std::array<double, C> gain{};
    for (double& g : gain) g = std::exp(spec.channel_gain_log_sd * standard_normal(rng));
    const double defect_amp = std::sqrt(spec.broken_variance_multiplier);
    const double own = std::sqrt(1.0 - spec.ncm_coupling);
    const double shared = std::sqrt(spec.ncm_coupling / 2.0);

    for (std::size_t event = 0; event < spec.measurements_per_coil; ++event) {
      // Simulated noise samples, one row of C channels per sample.
      const std::size_t S = spec.noise_samples;
      std::vector<double> noise(S * C);
      std::array<double, C> z{}, e{};
      for (std::size_t s = 0; s < S; ++s) {
        for (std::size_t c = 0; c < C; ++c) z[c] = standard_normal(rng);
        for (std::size_t c = 0; c < C; ++c) e[c] = standard_normal(rng);
        double* row = noise.data() + s * C;
        for (std::size_t c = 0; c < C; ++c) {
          if (broken[c]) {
            row[c] = gain[c] * defect_amp * e[c];
          } else {
            row[c] = gain[c] * (own * z[c] + shared * (z[ring_neighbor(c, -1)] + z[ring_neighbor(c, 1)]));
          }
        }
        for (std::size_t c = 0; c < C; ++c) {
          if (!broken[c]) continue;
          for (int offset : {-1, 1}) {
            const std::size_t nb = ring_neighbor(c, offset);
            if (!broken[nb]) row[nb] += spec.neighbor_effect * gain[c] * defect_amp * e[c];
          }
        }
      }
      std::array<double, C> mean{};
      for (std::size_t s = 0; s < S; ++s)
        for (std::size_t c = 0; c < C; ++c) mean[c] += noise[s * C + c];
      for (double& m : mean) m /= static_cast<double>(S);
      SquareMatrix ncm(C, 0.0);
      for (std::size_t i = 0; i < C; ++i) {
        for (std::size_t j = i; j < C; ++j) {
          double acc = 0.0;
          for (std::size_t s = 0; s < S; ++s) acc += (noise[s * C + i] - mean[i]) * (noise[s * C + j] - mean[j]);
          acc /= static_cast<double>(S - 1);
          ncm(i, j) = acc;
          ncm(j, i) = acc;
        }
      }

      const bool with_channels = uniform01(rng) < spec.channel_event_fraction;
      if (with_channels) {
        for (std::size_t c = 0; c < C; ++c) {
          ChannelSample row;
          row.coil_id = id;
          row.channel_index = c;
          row.label = broken[c] ? Label::broken : Label::normal;
          row.measurement = event;
          const double shift = broken[c] ? 1.0 : neighbor_weight[c];
          auto draw = [&](const NormalBrokenPair& p) {
            const double mu = p.normal_mean + shift * (p.broken_mean - p.normal_mean);
            const double sd = p.normal_sd + shift * (p.broken_sd - p.normal_sd);
            return mu + sd * standard_normal(rng);
          };
          row.features[0] = std::sqrt(ncm(c, c)) * std::exp(spec.noise_level_log_sd * standard_normal(rng));
          row.features[1] = draw(spec.csp);
          row.features[2] = draw(spec.body_coil_ratio);
          row.features[3] = draw(spec.csp_isocenter_ratio);
          out.channels.push_back(std::move(row));
        }
      }
      out.ncms.push_back(NcmSample{id, std::move(ncm), coil_label, Provenance::measured, event});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Text formats

std::string format_real(double value) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return fields;
}

bool next_line(std::istream& in, std::string& line) {
  if (!std::getline(in, line)) return false;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return true;
}

double parse_real(std::string_view field, const std::string& source, std::size_t line, std::string_view column) {
  double value = 0.0;
  const auto res = std::from_chars(field.data(), field.data() + field.size(), value);
  if (field.empty() || res.ec != std::errc() || res.ptr != field.data() + field.size() || !std::isfinite(value)) {
    throw ParseError(source, line, "column '" + std::string(column) + "': '" + std::string(field) +
                                       "' is not a finite number");
  }
  return value;
}

std::ofstream open_for_write(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  return out;
}

std::ifstream open_for_read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return in;
}

}  // namespace

std::vector<ChannelSample> read_channel_table(std::istream& in, const std::string& source) {
  std::string line;
  if (!next_line(in, line)) throw ParseError(source, 1, "missing header row");
  if (line != kChannelTableHeader) {
    const auto got = split_fields(line);
    const auto want = split_fields(kChannelTableHeader);
    for (std::size_t i = 0; i < want.size(); ++i) {
      if (i >= got.size() || got[i] != want[i]) {
        throw ParseError(source, 1, "header: missing column '" + std::string(want[i]) + "'");
      }
    }
    throw ParseError(source, 1, "header: unexpected extra columns");
  }
  constexpr std::string_view columns[] = {"coil_id", "channel_index", "noise_level", "csp",
                                          "body_coil_ratio", "csp_isocenter_ratio", "label"};
  std::vector<ChannelSample> rows;
  std::map<std::string, std::array<std::size_t, kChannelsPerCoil>> seen;
  std::size_t line_no = 1;
  while (next_line(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != 7) {
      throw ParseError(source, line_no, "expected 7 fields, got " + std::to_string(f.size()));
    }
    ChannelSample row;
    if (f[0].empty()) throw ParseError(source, line_no, "column 'coil_id' is empty");
    row.coil_id = std::string(f[0]);
    long long index = -1;
    const auto res = std::from_chars(f[1].data(), f[1].data() + f[1].size(), index);
    if (f[1].empty() || res.ec != std::errc() || res.ptr != f[1].data() + f[1].size()) {
      throw ParseError(source, line_no, "column 'channel_index': '" + std::string(f[1]) + "' is not an integer");
    }
    if (index < 0 || index >= static_cast<long long>(kChannelsPerCoil)) {
      throw ParseError(source, line_no, "column 'channel_index': " + std::to_string(index) + " outside [0, " +
                                            std::to_string(kChannelsPerCoil) + ")");
    }
    row.channel_index = static_cast<std::size_t>(index);
    for (std::size_t k = 0; k < kChannelFeatureCount; ++k) row.features[k] = parse_real(f[2 + k], source, line_no, columns[2 + k]);
    try {
      row.label = parse_label(f[6]);
    } catch (const ContractViolation& e) {
      throw ParseError(source, line_no, std::string("column 'label': ") + e.what());
    }
    row.measurement = seen[row.coil_id][row.channel_index]++;
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_channel_table(std::ostream& out, std::span<const ChannelSample> rows) {
  out << kChannelTableHeader << '\n';
  for (const auto& row : rows) {
    out << row.coil_id << ',' << row.channel_index;
    for (double v : row.features) out << ',' << format_real(v);
    out << ',' << to_string(row.label) << '\n';
  }
}

std::vector<ChannelSample> load_channel_table(const std::filesystem::path& path) {
  auto in = open_for_read(path);
  return read_channel_table(in, path.string());
}

void save_channel_table(const std::filesystem::path& path, std::span<const ChannelSample> rows) {
  auto out = open_for_write(path);
  write_channel_table(out, rows);
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

std::string ncm_table_header(bool with_provenance) {
  std::string header = with_provenance ? "coil_id,label,provenance" : "coil_id,label";
  for (std::size_t i = 0; i < kChannelsPerCoil; ++i)
    for (std::size_t j = 0; j < kChannelsPerCoil; ++j) header += ",m_" + std::to_string(i) + "_" + std::to_string(j);
  return header;
}

std::vector<NcmSample> read_ncm_records(std::istream& in, const std::string& source) {
  std::string line;
  if (!next_line(in, line)) throw ParseError(source, 1, "missing header row");
  bool with_provenance;
  if (line == ncm_table_header(false)) {
    with_provenance = false;
  } else if (line == ncm_table_header(true)) {
    with_provenance = true;
  } else {
    throw ParseError(source, 1, "header does not match 'coil_id,label[,provenance],m_0_0,...,m_19_19'");
  }
  const std::size_t lead = with_provenance ? 3 : 2;
  constexpr std::size_t entries = kChannelsPerCoil * kChannelsPerCoil;
  std::vector<NcmSample> records;
  std::map<std::string, std::size_t> per_coil;
  std::size_t line_no = 1;
  while (next_line(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_fields(line);
    const std::string record_name = "record at line " + std::to_string(line_no) + " (coil '" + std::string(f[0]) + "')";
    if (f.size() < lead) throw ParseError(source, line_no, "too few fields");
    if (f.size() - lead != entries) {
      throw ValidationError(source + ": " + record_name + ": expected " + std::to_string(entries) +
                            " matrix values, got " + std::to_string(f.size() - lead));
    }
    NcmSample rec;
    if (f[0].empty()) throw ParseError(source, line_no, "column 'coil_id' is empty");
    rec.coil_id = std::string(f[0]);
    try {
      rec.label = parse_label(f[1]);
      if (with_provenance) rec.provenance = parse_provenance(f[2]);
    } catch (const ContractViolation& e) {
      throw ParseError(source, line_no, e.what());
    }
    std::vector<double> values(entries);
    for (std::size_t k = 0; k < entries; ++k) {
      const std::string column = "m_" + std::to_string(k / kChannelsPerCoil) + "_" + std::to_string(k % kChannelsPerCoil);
      values[k] = parse_real(f[lead + k], source, line_no, column);
    }
    rec.matrix = SquareMatrix(kChannelsPerCoil, std::move(values));
    validate_ncm(rec.matrix, source + ": " + record_name);
    rec.measurement = per_coil[rec.coil_id]++;
    records.push_back(std::move(rec));
  }
  return records;
}

void write_ncm_records(std::ostream& out, std::span<const NcmSample> records, bool with_provenance) {
  out << ncm_table_header(with_provenance) << '\n';
  for (const auto& rec : records) {
    if (rec.matrix.order() != kChannelsPerCoil) {
      throw DimensionError("NCM table rows must be " + std::to_string(kChannelsPerCoil) + "x" +
                           std::to_string(kChannelsPerCoil));
    }
    out << rec.coil_id << ',' << to_string(rec.label);
    if (with_provenance) out << ',' << to_string(rec.provenance);
    for (double v : rec.matrix.values()) out << ',' << format_real(v);
    out << '\n';
  }
}

std::vector<NcmSample> load_ncm_records(const std::filesystem::path& path) {
  auto in = open_for_read(path);
  return read_ncm_records(in, path.string());
}

void save_ncm_records(const std::filesystem::path& path, std::span<const NcmSample> records, bool with_provenance) {
  auto out = open_for_write(path);
  write_ncm_records(out, records, with_provenance);
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace coilwatch
