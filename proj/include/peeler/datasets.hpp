#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "peeler/error.hpp"
#include "peeler/rng.hpp"
#include "peeler/tensor.hpp"

namespace peeler {

// Feature matrix plus dense labels in [0, n_classes).
struct LabeledDataset {
  Tensor features;  // [n_samples, dim]
  std::vector<std::size_t> labels;
  std::vector<std::vector<std::size_t>> class_index;
  std::vector<long long> original_labels;  // original_labels[c] is the label class c had on disk

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.cols(); }
  std::size_t n_classes() const { return class_index.size(); }

  // Validates labels and builds class_index. Labels must already be dense.
  static LabeledDataset build(Tensor features, std::vector<std::size_t> labels, std::size_t n_classes) {
    if (features.rank() != 2 || features.rows() != labels.size()) {
      throw DataError("dataset: feature matrix " + shape_str(features.shape()) + " does not match " +
                      std::to_string(labels.size()) + " labels");
    }
    LabeledDataset ds;
    ds.class_index.resize(n_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] >= n_classes) {
        throw DataError("dataset: label " + std::to_string(labels[i]) + " out of range at sample " + std::to_string(i));
      }
      ds.class_index[labels[i]].push_back(i);
    }
    for (std::size_t c = 0; c < n_classes; ++c) {
      if (ds.class_index[c].empty()) throw DataError("dataset: class " + std::to_string(c) + " has no samples");
    }
    ds.features = std::move(features);
    ds.labels = std::move(labels);
    ds.original_labels.resize(n_classes);
    for (std::size_t c = 0; c < n_classes; ++c) ds.original_labels[c] = static_cast<long long>(c);
    return ds;
  }

  // Copies the given sample rows into a [idx.size(), dim] tensor.
  Tensor gather(std::span<const std::size_t> idx) const {
    const std::size_t d = dim();
    Tensor out = Tensor::zeros({idx.size(), d});
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(features.data().begin() + idx[i] * d, d, out.data().begin() + i * d);
    }
    return out;
  }
};

struct SyntheticSpec {
  std::size_t n_classes = 20;
  std::size_t dim = 8;
  std::size_t samples_per_class = 100;
  double center_scale = 1.0;
  double within_std = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_classes < 2) throw ConfigError("synthetic: n_classes must be >= 2, got " + std::to_string(n_classes));
    if (dim < 1) throw ConfigError("synthetic: dim must be >= 1");
    if (samples_per_class < 1) throw ConfigError("synthetic: samples_per_class must be >= 1");
    if (!(within_std > 0.0)) throw ConfigError("synthetic: within_std must be > 0");
    if (!(center_scale >= 0.0)) throw ConfigError("synthetic: center_scale must be >= 0");
  }
};

// Class c ~ Normal(center_c, within_std^2 I), centers uniform in the
// [-center_scale, center_scale]^dim box. Samples are ordered by class.
inline LabeledDataset generate_gaussian_mixture(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  std::uniform_real_distribution<double> center_dist(-spec.center_scale, spec.center_scale);
  std::normal_distribution<double> noise(0.0, spec.within_std);

  std::vector<double> centers(spec.n_classes * spec.dim);
  for (auto& c : centers) c = center_dist(rng);

  const std::size_t n = spec.n_classes * spec.samples_per_class;
  Tensor features = Tensor::zeros({n, spec.dim});
  std::vector<std::size_t> labels(n);
  std::size_t row = 0;
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    for (std::size_t s = 0; s < spec.samples_per_class; ++s, ++row) {
      labels[row] = c;
      for (std::size_t m = 0; m < spec.dim; ++m) {
        features.at(row, m) = centers[c * spec.dim + m] + noise(rng);
      }
    }
  }
  return LabeledDataset::build(std::move(features), std::move(labels), spec.n_classes);
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_fields(std::string_view line, char delim) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(delim, start);
    out.push_back(trim(line.substr(start, pos == std::string_view::npos ? line.npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::optional<double> parse_real(std::string_view s) {
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::optional<long long> parse_integer(std::string_view s) {
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  long long v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

// Rows are `d` real fields then one integer label. A first row that does not
// parse as numbers is treated as a header. Labels are remapped to dense
// [0, n) in ascending order of the original values.
inline LabeledDataset load_delimited(const std::filesystem::path& path, char delimiter = ',') {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset file " + path.string());

  std::vector<double> values;
  std::vector<long long> raw_labels;
  std::optional<std::size_t> width;
  std::string line;
  std::size_t line_no = 0;
  bool first_content = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_fields(line, delimiter);
    const std::string where = path.string() + " row " + std::to_string(line_no);

    if (first_content) {
      first_content = false;
      const bool numeric = std::all_of(fields.begin(), fields.end(),
                                       [](std::string_view f) { return detail::parse_real(f).has_value(); });
      if (!numeric) continue;
    }
    if (fields.size() < 2) {
      throw DataError(where + ": expected at least one feature and a label, got " + std::to_string(fields.size()) +
                      " field(s)");
    }
    if (!width) width = fields.size();
    if (fields.size() != *width) {
      throw DataError(where + ": has " + std::to_string(fields.size()) + " fields, expected " +
                      std::to_string(*width));
    }
    for (std::size_t j = 0; j + 1 < fields.size(); ++j) {
      const auto v = detail::parse_real(fields[j]);
      if (!v) throw DataError(where + ": non-numeric feature '" + std::string(fields[j]) + "' in column " + std::to_string(j + 1));
      values.push_back(*v);
    }
    const auto label = detail::parse_integer(fields.back());
    if (!label) throw DataError(where + ": label '" + std::string(fields.back()) + "' is not an integer");
    if (*label < 0) throw DataError(where + ": negative label " + std::to_string(*label));
    raw_labels.push_back(*label);
  }
  if (raw_labels.empty()) throw DataError(path.string() + ": no samples");

  std::map<long long, std::size_t> dense;
  for (auto l : raw_labels) dense.emplace(l, 0);
  std::vector<long long> originals;
  for (auto& [orig, idx] : dense) {
    idx = originals.size();
    originals.push_back(orig);
  }
  std::vector<std::size_t> labels;
  labels.reserve(raw_labels.size());
  for (auto l : raw_labels) labels.push_back(dense[l]);

  const std::size_t d = *width - 1;
  auto ds = LabeledDataset::build(Tensor({raw_labels.size(), d}, std::move(values)), std::move(labels),
                                  originals.size());
  ds.original_labels = std::move(originals);
  return ds;
}

// Header "x0,...,x{d-1},label"; values printed with 17 significant digits.
inline void write_delimited(const LabeledDataset& ds, const std::filesystem::path& path, char delimiter = ',') {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write dataset file " + path.string());
  for (std::size_t m = 0; m < ds.dim(); ++m) out << 'x' << m << delimiter;
  out << "label\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t m = 0; m < ds.dim(); ++m) out << detail::format_real(ds.features.at(i, m)) << delimiter;
    out << ds.original_labels[ds.labels[i]] << '\n';
  }
  if (!out) throw DataError("write failed for " + path.string());
}

struct ClassSplit {
  std::vector<std::size_t> train_classes;
  std::vector<std::size_t> val_classes;
  std::vector<std::size_t> test_classes;
};

// Shuffles class ids by seed, then takes round(f_val * n) validation and
// round(f_test * n) test classes; train receives the remainder. A part with a
// zero fraction may be empty only when allow_empty is set.
inline ClassSplit split_classes(const LabeledDataset& ds, std::array<double, 3> fractions, std::uint64_t seed,
                                bool allow_empty = false) {
  const double total = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1, got " + detail::format_real(total));
  for (double f : fractions) {
    if (f < 0.0) throw ConfigError("split fractions must be nonnegative");
  }
  const std::size_t n = ds.n_classes();
  std::vector<std::size_t> classes(n);
  std::iota(classes.begin(), classes.end(), std::size_t{0});
  Rng rng = derive_rng(seed, Purpose::kSplit);
  std::shuffle(classes.begin(), classes.end(), rng);

  const auto n_val = static_cast<std::size_t>(std::llround(fractions[1] * static_cast<double>(n)));
  const auto n_test = static_cast<std::size_t>(std::llround(fractions[2] * static_cast<double>(n)));
  if (n_val + n_test > n) throw ConfigError("split: too few classes for requested fractions");
  const std::size_t n_train = n - n_val - n_test;

  const std::array<std::size_t, 3> counts{n_train, n_val, n_test};
  const char* names[] = {"train", "val", "test"};
  for (int p = 0; p < 3; ++p) {
    if (counts[p] > 0) continue;
    if (fractions[p] > 0.0) {
      throw ConfigError(std::string("split: ") + std::to_string(n) + " classes are too few; " + names[p] +
                        " part rounds to zero classes");
    }
    if (!allow_empty) {
      throw ConfigError(std::string("split: ") + names[p] + " part is empty; set allow_empty_split to permit this");
    }
  }

  ClassSplit split;
  split.train_classes.assign(classes.begin(), classes.begin() + n_train);
  split.val_classes.assign(classes.begin() + n_train, classes.begin() + n_train + n_val);
  split.test_classes.assign(classes.begin() + n_train + n_val, classes.end());
  return split;
}

// Per-class partition of sample indices into a training part and a held-out
// part. Used by the large-scale regime, where training and evaluation share
// classes but must not share samples.
struct SampleHoldout {
  std::vector<std::vector<std::size_t>> train;  // indexed by class id
  std::vector<std::vector<std::size_t>> held;
};

inline SampleHoldout holdout_samples(const LabeledDataset& ds, double held_fraction, std::uint64_t seed) {
  if (!(held_fraction > 0.0 && held_fraction < 1.0)) throw ConfigError("holdout fraction must be in (0, 1)");
  SampleHoldout h;
  h.train.resize(ds.n_classes());
  h.held.resize(ds.n_classes());
  for (std::size_t c = 0; c < ds.n_classes(); ++c) {
    auto idx = ds.class_index[c];
    Rng rng = derive_rng(seed, Purpose::kHoldout, c);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_held = static_cast<std::size_t>(std::llround(held_fraction * static_cast<double>(idx.size())));
    h.held[c].assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_held));
    h.train[c].assign(idx.begin() + static_cast<std::ptrdiff_t>(n_held), idx.end());
  }
  return h;
}

}  // namespace peeler
