#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "coilwatch/label.hpp"

namespace coilwatch {

inline constexpr std::size_t kChannelsPerCoil = 20;
inline constexpr std::size_t kChannelFeatureCount = 4;

/// Column order of the per-channel feature vector.
inline constexpr std::array<std::string_view, kChannelFeatureCount> kChannelFeatureNames = {
    "noise_level", "csp", "body_coil_ratio", "csp_isocenter_ratio"};

using ChannelFeatures = std::array<double, kChannelFeatureCount>;

/// One coil channel measured in one adjustment event.
struct ChannelSample {
  std::string coil_id;
  std::size_t channel_index = 0;
  ChannelFeatures features{};
  Label label = Label::normal;
  /// Ordinal of the measurement event within the coil. Not serialized; the
  /// loader recovers it from the order in which channel indices repeat.
  std::size_t measurement = 0;

  friend bool operator==(const ChannelSample&, const ChannelSample&) = default;
};

/// Dense square matrix, row-major.
class SquareMatrix {
 public:
  SquareMatrix() = default;
  explicit SquareMatrix(std::size_t order, double fill = 0.0);
  SquareMatrix(std::size_t order, std::vector<double> values);
  static SquareMatrix identity(std::size_t order);

  std::size_t order() const noexcept { return order_; }
  double operator()(std::size_t row, std::size_t col) const { return values_[row * order_ + col]; }
  double& operator()(std::size_t row, std::size_t col) { return values_[row * order_ + col]; }
  std::span<const double> values() const noexcept { return values_; }

  double trace() const;
  double frobenius_norm() const;
  double max_abs() const;

  friend bool operator==(const SquareMatrix&, const SquareMatrix&) = default;

 private:
  std::size_t order_ = 0;
  std::vector<double> values_;
};

/// Tolerances that every noise covariance matrix must satisfy.
struct NcmTolerance {
  static constexpr double kSymmetry = 1e-9;     // relative to max |entry|
  static constexpr double kEigenvalue = 1e-9;   // min eigenvalue >= -kEigenvalue * max eigenvalue
};

/// Ascending eigenvalues of a symmetric matrix.
std::vector<double> symmetric_eigenvalues(const SquareMatrix& m);
/// Throws ValidationError naming the failed invariant (symmetry, PSD, diagonal).
void validate_ncm(const SquareMatrix& m, const std::string& context = "matrix");

/// One coil's noise covariance matrix from one measurement event.
struct NcmSample {
  std::string coil_id;
  SquareMatrix matrix;
  Label label = Label::normal;
  Provenance provenance = Provenance::measured;
  std::size_t measurement = 0;

  friend bool operator==(const NcmSample&, const NcmSample&) = default;
};

/// Indices of one coil's records inside a Dataset.
struct CoilRecords {
  Label label = Label::normal;
  std::vector<std::size_t> channel_rows;
  std::vector<std::size_t> ncm_rows;
};

struct Dataset {
  std::vector<ChannelSample> channels;
  std::vector<NcmSample> ncms;

  /// Groups records by coil id (lexicographic order). A coil is broken iff
  /// any of its records is broken.
  std::map<std::string, CoilRecords> coils() const;
  /// Checks that every (coil, measurement) event carries each of the 20
  /// channel indices exactly once. Throws ValidationError.
  void validate_channel_events() const;
};

struct NormalBrokenPair {
  double normal_mean, normal_sd;
  double broken_mean, broken_sd;
};

/// Parameters of the synthetic fleet generator. All defaults are synthetic
/// stand-ins; they are chosen so the two classes overlap.
struct SyntheticSpec {
  std::size_t coils = 1000;
  std::size_t measurements_per_coil = 1;
  /// Probability that a measurement event also yields the per-channel table.
  double channel_event_fraction = 1.0;
  double broken_fraction = 0.068;
  std::size_t min_broken_channels = 1;
  std::size_t max_broken_channels = 3;

  /// Multiplicative log-normal jitter of noise_level around sqrt(NCM diagonal).
  double noise_level_log_sd = 0.12;
  NormalBrokenPair csp{50.0, 6.0, 38.0, 7.0};
  NormalBrokenPair body_coil_ratio{1.0, 0.08, 0.9, 0.1};
  NormalBrokenPair csp_isocenter_ratio{1.0, 0.06, 0.94, 0.08};
  /// Fraction of a broken channel's feature shift (and noise leakage) seen
  /// by its two nearest-index neighbours.
  double neighbor_effect = 0.35;

  /// Baseline share of each channel's noise coupled from its neighbours.
  double ncm_coupling = 0.3;
  double broken_variance_multiplier = 2.5;
  /// Per-coil log-normal spread of channel noise amplitudes.
  double channel_gain_log_sd = 0.15;
  std::size_t noise_samples = 64;

  std::uint64_t seed = 7;

  void validate() const;
};

Dataset generate_synthetic(const SyntheticSpec& spec);

// File formats: comma-separated, header row, LF line endings, '.' decimals.
inline constexpr std::string_view kChannelTableHeader =
    "coil_id,channel_index,noise_level,csp,body_coil_ratio,csp_isocenter_ratio,label";

std::vector<ChannelSample> read_channel_table(std::istream& in, const std::string& source = "<stream>");
void write_channel_table(std::ostream& out, std::span<const ChannelSample> rows);
std::vector<ChannelSample> load_channel_table(const std::filesystem::path& path);
void save_channel_table(const std::filesystem::path& path, std::span<const ChannelSample> rows);

/// Header `coil_id,label,m_0_0,...,m_19_19`; with `provenance` it gains a
/// third column `provenance` before the matrix entries.
std::string ncm_table_header(bool with_provenance);
std::vector<NcmSample> read_ncm_records(std::istream& in, const std::string& source = "<stream>");
void write_ncm_records(std::ostream& out, std::span<const NcmSample> records, bool with_provenance);
std::vector<NcmSample> load_ncm_records(const std::filesystem::path& path);
void save_ncm_records(const std::filesystem::path& path, std::span<const NcmSample> records,
                      bool with_provenance = false);

/// Shortest text that parses back to exactly `value`.
std::string format_real(double value);

}  // namespace coilwatch
