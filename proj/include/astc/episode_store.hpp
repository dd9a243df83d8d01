#pragma once

#include "astc/common.hpp"
#include "astc/text_io.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace astc {

enum class Outcome { none, discharge, death };

inline std::string to_string(Outcome o) {
  switch (o) {
    case Outcome::discharge: return "discharge";
    case Outcome::death: return "death";
    default: return "-";
  }
}

inline Outcome parse_outcome(std::string_view s) {
  if (s == "-") return Outcome::none;
  if (s == "discharge") return Outcome::discharge;
  if (s == "death") return Outcome::death;
  throw DataError("unknown outcome '" + std::string(s) + "'");
}

struct EpisodeStep {
  Vec obs;
  Vec action;
  double reward = 0.0;
  bool is_terminal = false;
  Outcome outcome = Outcome::none;

  bool operator==(const EpisodeStep& o) const {
    return obs == o.obs && action == o.action && reward == o.reward &&
           is_terminal == o.is_terminal && outcome == o.outcome;
  }
};

struct Episode {
  long long id = 0;
  std::vector<EpisodeStep> steps;

  std::size_t length() const { return steps.size(); }
  const EpisodeStep& last() const { return steps.back(); }
  Outcome outcome() const { return steps.back().outcome; }
  bool operator==(const Episode& o) const { return id == o.id && steps == o.steps; }
};

enum class SplitTag { all, development, test };

struct NormalizationBounds {
  Vec min;
  Vec max;

  TextDoc to_doc() const {
    TextDoc doc("normalization");
    doc.put_vec("min", min);
    doc.put_vec("max", max);
    return doc;
  }
  static NormalizationBounds from_doc(const TextDoc& doc) {
    NormalizationBounds b{doc.get_vec("min"), doc.get_vec("max")};
    if (b.min.size() != b.max.size()) throw DataError("normalization: min/max length mismatch");
    return b;
  }
};

struct Dataset {
  std::vector<Episode> episodes;
  int d_obs = 0;
  int d_act = 0;
  std::optional<NormalizationBounds> normalization;
  SplitTag split_tag = SplitTag::all;

  std::size_t n_steps() const {
    std::size_t n = 0;
    for (const auto& e : episodes) n += e.length();
    return n;
  }

  /// Every observation vector, episode by episode.
  std::vector<Vec> all_observations() const {
    std::vector<Vec> out;
    out.reserve(n_steps());
    for (const auto& e : episodes)
      for (const auto& s : e.steps) out.push_back(s.obs);
    return out;
  }

  bool operator==(const Dataset& o) const {
    return d_obs == o.d_obs && d_act == o.d_act && episodes == o.episodes;
  }
};

/// Validation knobs applied while loading.
struct SchemaConfig {
  /// Reject nonzero rewards on non-terminal steps.
  bool terminal_only_rewards = true;
  /// When set, terminal rewards must be +m (discharge), -m (death) or 0 (no outcome).
  std::optional<double> reward_magnitude;
};

namespace detail {

inline void validate_episode(const Episode& ep, int d_obs, int d_act, const SchemaConfig& cfg,
                             const std::string& where) {
  if (ep.steps.empty()) throw DataError(where + "episode " + std::to_string(ep.id) + " is empty");
  for (std::size_t t = 0; t < ep.steps.size(); ++t) {
    const auto& s = ep.steps[t];
    std::string ctx = where + "episode " + std::to_string(ep.id) + " step " + std::to_string(t);
    if (s.obs.size() != d_obs || s.action.size() != d_act)
      throw DataError(ctx + ": inconsistent dimensions");
    if (!s.obs.allFinite()) throw DataError(ctx + ": non-finite observation");
    if (!s.action.allFinite()) throw DataError(ctx + ": non-finite action");
    if (!std::isfinite(s.reward)) throw DataError(ctx + ": non-finite reward");
    bool last = t + 1 == ep.steps.size();
    if (s.is_terminal && !last) throw DataError(ctx + ": terminal flag before episode end");
    if (last && !s.is_terminal) throw DataError(where + "unterminated episode " + std::to_string(ep.id));
    if (!s.is_terminal && s.outcome != Outcome::none)
      throw DataError(ctx + ": outcome on non-terminal step");
    if (!s.is_terminal && cfg.terminal_only_rewards && s.reward != 0.0)
      throw DataError(ctx + ": nonzero reward on non-terminal step");
    if (s.is_terminal && cfg.reward_magnitude) {
      double m = *cfg.reward_magnitude;
      double expect = s.outcome == Outcome::discharge ? m : s.outcome == Outcome::death ? -m : 0.0;
      if (s.reward != expect) throw DataError(ctx + ": terminal reward does not match outcome");
    }
  }
}

}  // namespace detail

inline void validate_dataset(const Dataset& ds, const SchemaConfig& cfg = {}) {
  if (ds.d_obs <= 0 || ds.d_act <= 0) throw DataError("dataset dimensions must be positive");
  std::set<long long> ids;
  for (const auto& ep : ds.episodes) {
    if (!ids.insert(ep.id).second) throw DataError("duplicate episode id " + std::to_string(ep.id));
    detail::validate_episode(ep, ds.d_obs, ds.d_act, cfg, "");
  }
}

/// Parses the tab-separated episode format (see README).
inline Dataset parse_dataset(std::istream& in, const SchemaConfig& cfg = {},
                             const std::string& source = "<stream>") {
  Dataset ds;
  std::string line;
  std::size_t lineno = 0;
  bool have_dims = false;
  std::set<long long> seen_ids;
  auto fail = [&](const std::string& msg) -> DataError {
    return DataError(source + ":" + std::to_string(lineno) + ": " + msg);
  };
  auto parse_vec = [&](std::string_view field, int expected) {
    auto parts = split_view(field, ',');
    if (static_cast<int>(parts.size()) != expected)
      throw fail("expected " + std::to_string(expected) + " values, got " + std::to_string(parts.size()));
    Vec v(expected);
    for (int i = 0; i < expected; ++i) v[i] = parse_double(parts[static_cast<std::size_t>(i)]);
    return v;
  };

  Episode* current = nullptr;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    if (line.rfind("#dims", 0) == 0) {
      std::istringstream hs(line.substr(5));
      if (!(hs >> ds.d_obs >> ds.d_act) || ds.d_obs <= 0 || ds.d_act <= 0) throw fail("malformed #dims header");
      have_dims = true;
      continue;
    }
    if (line.front() == '#') continue;
    if (!have_dims) throw fail("missing '#dims d_obs d_act' header");
    auto f = split_view(line, '\t');
    if (f.size() != 7) throw fail("malformed row: expected 7 tab-separated fields, got " + std::to_string(f.size()));
    try {
      long long id = parse_int(f[0]);
      long long t = parse_int(f[1]);
      EpisodeStep step;
      step.obs = parse_vec(f[2], ds.d_obs);
      step.action = parse_vec(f[3], ds.d_act);
      step.reward = parse_double(f[4]);
      if (f[5] != "0" && f[5] != "1") throw fail("terminal flag must be 0 or 1");
      step.is_terminal = f[5] == "1";
      step.outcome = parse_outcome(f[6]);
      if (!step.obs.allFinite()) throw fail("non-finite observation");
      if (!step.is_terminal && step.outcome != Outcome::none) throw fail("outcome on non-terminal row");
      if (!step.is_terminal && cfg.terminal_only_rewards && step.reward != 0.0)
        throw fail("nonzero reward on non-terminal row");

      if (current == nullptr || current->id != id) {
        if (current != nullptr && !current->steps.back().is_terminal)
          throw fail("unterminated episode " + std::to_string(current->id));
        if (!seen_ids.insert(id).second) throw fail("episode " + std::to_string(id) + " is not contiguous");
        ds.episodes.push_back(Episode{id, {}});
        current = &ds.episodes.back();
      } else if (current->steps.back().is_terminal) {
        throw fail("row after terminal step of episode " + std::to_string(id));
      }
      if (t != static_cast<long long>(current->steps.size()))
        throw fail("expected t=" + std::to_string(current->steps.size()) + ", got " + std::to_string(t));
      current->steps.push_back(std::move(step));
    } catch (const DataError& e) {
      std::string msg = e.what();
      if (msg.rfind(source + ":", 0) == 0) throw;
      throw fail(msg);
    }
  }
  if (!have_dims) throw DataError(source + ": missing '#dims d_obs d_act' header");
  if (current != nullptr && !current->steps.back().is_terminal)
    throw DataError(source + ": unterminated episode " + std::to_string(current->id));
  validate_dataset(ds, cfg);
  return ds;
}

inline Dataset load_dataset(const std::string& path, const SchemaConfig& cfg = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset " + path);
  return parse_dataset(in, cfg, path);
}

inline void write_dataset(const Dataset& ds, std::ostream& out) {
  out << "#dims " << ds.d_obs << ' ' << ds.d_act << '\n';
  auto join = [](const Vec& v) {
    std::string s;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      if (i) s += ',';
      s += fmt_double(v[i]);
    }
    return s;
  };
  for (const auto& ep : ds.episodes) {
    for (std::size_t t = 0; t < ep.steps.size(); ++t) {
      const auto& s = ep.steps[t];
      out << ep.id << '\t' << t << '\t' << join(s.obs) << '\t' << join(s.action) << '\t'
          << fmt_double(s.reward) << '\t' << (s.is_terminal ? 1 : 0) << '\t' << to_string(s.outcome) << '\n';
    }
  }
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write dataset " + path);
  write_dataset(ds, out);
}

/// Per-dimension min/max of the observations.
inline NormalizationBounds observation_bounds(const Dataset& ds) {
  NormalizationBounds b{Vec::Constant(ds.d_obs, std::numeric_limits<double>::infinity()),
                        Vec::Constant(ds.d_obs, -std::numeric_limits<double>::infinity())};
  for (const auto& ep : ds.episodes)
    for (const auto& s : ep.steps) {
      b.min = b.min.cwiseMin(s.obs);
      b.max = b.max.cwiseMax(s.obs);
    }
  return b;
}

/// Maps one observation affinely with the given bounds and clips to [0,1].
/// Constant dimensions (max == min) map to 0.5.
inline Vec normalize_observation(const Vec& o, const NormalizationBounds& bounds) {
  if (bounds.min.size() != o.size()) throw DataError("normalization bounds do not match d_obs");
  Vec z(o.size());
  for (Eigen::Index i = 0; i < o.size(); ++i) {
    double lo = bounds.min[i], hi = bounds.max[i];
    z[i] = hi > lo ? std::clamp((o[i] - lo) / (hi - lo), 0.0, 1.0) : 0.5;
  }
  return z;
}

inline Dataset apply_normalization(const Dataset& ds, const NormalizationBounds& bounds) {
  if (bounds.min.size() != ds.d_obs) throw DataError("normalization bounds do not match d_obs");
  Dataset out = ds;
  for (auto& ep : out.episodes)
    for (auto& s : ep.steps) s.obs = normalize_observation(s.obs, bounds);
  out.normalization = bounds;
  return out;
}

/// Normalizes a development set with its own min/max; the bounds are attached
/// to the result for reuse on the test set.
inline Dataset normalize(const Dataset& ds) {
  auto bounds = observation_bounds(ds);
  for (int i = 0; i < ds.d_obs; ++i)
    if (!(bounds.max[i] > bounds.min[i]))
      log::warn("observation dimension " + std::to_string(i) + " is constant; mapped to 0.5");
  return apply_normalization(ds, bounds);
}

/// Discretization of the continuous action space into a joint grid of bins.
///
/// Each dimension has ascending upper edges; value x falls in the first bin
/// whose upper edge is >= x, or in the last bin. With a dedicated zero bin the
/// first edge is 0, so the zero bin holds every dose <= 0.
struct ActionBinning {
  std::vector<std::vector<double>> edges;
  std::vector<std::vector<double>> representatives;
  Vec range_min;
  Vec range_max;

  int d_act() const { return static_cast<int>(edges.size()); }
  int n_bins(int dim) const { return static_cast<int>(representatives[static_cast<std::size_t>(dim)].size()); }

  int n_joint() const {
    int n = 1;
    for (const auto& r : representatives) n *= static_cast<int>(r.size());
    return n;
  }

  int bin_of_dim(int dim, double x) const {
    const auto& e = edges[static_cast<std::size_t>(dim)];
    return static_cast<int>(std::lower_bound(e.begin(), e.end(), x) - e.begin());
  }

  /// Joint bin index; the last dimension varies fastest.
  int bin_of(const Vec& action) const {
    if (action.size() != d_act()) throw DataError("action has wrong dimension for binning");
    int j = 0;
    for (int d = 0; d < d_act(); ++d) j = j * n_bins(d) + bin_of_dim(d, action[d]);
    return j;
  }

  Vec representative(int joint) const {
    if (joint < 0 || joint >= n_joint()) throw DataError("joint action bin out of range");
    Vec a(d_act());
    for (int d = d_act() - 1; d >= 0; --d) {
      int nb = n_bins(d);
      a[d] = representatives[static_cast<std::size_t>(d)][static_cast<std::size_t>(joint % nb)];
      joint /= nb;
    }
    return a;
  }

  /// Joint bin whose representative is nearest (per-dimension nearest is exact for a grid).
  int nearest_bin(const Vec& action) const {
    int j = 0;
    for (int d = 0; d < d_act(); ++d) {
      const auto& reps = representatives[static_cast<std::size_t>(d)];
      int best = 0;
      for (int b = 1; b < static_cast<int>(reps.size()); ++b)
        if (std::abs(reps[static_cast<std::size_t>(b)] - action[d]) <
            std::abs(reps[static_cast<std::size_t>(best)] - action[d]))
          best = b;
      j = j * static_cast<int>(reps.size()) + best;
    }
    return j;
  }

  TextDoc to_doc() const {
    TextDoc doc("binning");
    doc.put_int("d_act", d_act());
    for (int d = 0; d < d_act(); ++d) {
      const auto& e = edges[static_cast<std::size_t>(d)];
      const auto& r = representatives[static_cast<std::size_t>(d)];
      doc.put_vec("edges_" + std::to_string(d), Eigen::Map<const Vec>(e.data(), static_cast<Eigen::Index>(e.size())));
      doc.put_vec("reps_" + std::to_string(d), Eigen::Map<const Vec>(r.data(), static_cast<Eigen::Index>(r.size())));
    }
    doc.put_vec("range_min", range_min);
    doc.put_vec("range_max", range_max);
    return doc;
  }

  static ActionBinning from_doc(const TextDoc& doc) {
    ActionBinning b;
    auto d = doc.get_int("d_act");
    for (long long i = 0; i < d; ++i) {
      Vec e = doc.get_vec("edges_" + std::to_string(i));
      Vec r = doc.get_vec("reps_" + std::to_string(i));
      if (r.size() != e.size() + 1) throw DataError("binning: edges/representatives size mismatch");
      b.edges.emplace_back(e.data(), e.data() + e.size());
      b.representatives.emplace_back(r.data(), r.data() + r.size());
    }
    b.range_min = doc.get_vec("range_min");
    b.range_max = doc.get_vec("range_max");
    return b;
  }
};

namespace detail {

/// Splits sorted values (with duplicates) into at most `nb` quantile groups without
/// separating equal values. Returns (upper edges, per-group medians).
inline std::pair<std::vector<double>, std::vector<double>> quantile_groups(const std::vector<double>& sorted,
                                                                           int nb) {
  std::vector<double> distinct;
  std::vector<std::size_t> cum;  // cumulative count through each distinct value
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (distinct.empty() || sorted[i] != distinct.back()) {
      distinct.push_back(sorted[i]);
      cum.push_back(0);
    }
    cum.back() = i + 1;
  }
  const std::size_t n = sorted.size();
  std::vector<std::size_t> cuts;  // last distinct index of each group except the final one
  if (static_cast<int>(distinct.size()) <= nb) {
    for (std::size_t i = 0; i + 1 < distinct.size(); ++i) cuts.push_back(i);
  } else {
    std::size_t next = 0;
    for (int g = 1; g < nb; ++g) {
      double target = static_cast<double>(g) * static_cast<double>(n) / nb;
      std::size_t idx = next;
      while (idx + 1 < distinct.size() && static_cast<double>(cum[idx]) < target) ++idx;
      std::size_t remaining_groups = static_cast<std::size_t>(nb - g);
      idx = std::min(idx, distinct.size() - 1 - remaining_groups);
      if (!cuts.empty() && idx <= cuts.back()) idx = cuts.back() + 1;
      cuts.push_back(idx);
      next = idx + 1;
    }
  }
  std::vector<double> edges, medians;
  std::size_t begin = 0;  // position in `sorted`
  for (std::size_t g = 0; g <= cuts.size(); ++g) {
    std::size_t end = g < cuts.size() ? cum[cuts[g]] : n;
    std::size_t len = end - begin;
    double med = len % 2 == 1 ? sorted[begin + len / 2]
                              : 0.5 * (sorted[begin + len / 2 - 1] + sorted[begin + len / 2]);
    medians.push_back(med);
    if (g < cuts.size()) edges.push_back(0.5 * (sorted[end - 1] + sorted[end]));
    begin = end;
  }
  return {edges, medians};
}

}  // namespace detail

/// Fits per-dimension quantile bins. With `zero_bin`, exact-zero doses get their
/// own bin and the nonzero doses share the remaining n_bins-1 bins.
inline ActionBinning fit_action_bins(const Dataset& ds, const std::vector<int>& n_bins, bool zero_bin) {
  if (static_cast<int>(n_bins.size()) != ds.d_act) throw ConfigError("need one bin count per action dimension");
  ActionBinning out;
  out.range_min = Vec::Constant(ds.d_act, std::numeric_limits<double>::infinity());
  out.range_max = Vec::Constant(ds.d_act, -std::numeric_limits<double>::infinity());
  for (int d = 0; d < ds.d_act; ++d) {
    int nb = n_bins[static_cast<std::size_t>(d)];
    if (nb < 2) throw ConfigError("n_bins must be >= 2");
    std::vector<double> vals;
    for (const auto& ep : ds.episodes)
      for (const auto& s : ep.steps) vals.push_back(s.action[d]);
    if (vals.empty()) throw DataError("cannot bin actions of an empty dataset");
    std::sort(vals.begin(), vals.end());
    out.range_min[d] = vals.front();
    out.range_max[d] = vals.back();

    std::vector<double> edges, reps;
    bool has_zero = zero_bin && std::binary_search(vals.begin(), vals.end(), 0.0);
    std::vector<double> rest;
    if (has_zero) {
      for (double v : vals)
        if (v != 0.0) rest.push_back(v);
      edges.push_back(0.0);
      reps.push_back(0.0);
      nb -= 1;
      if (!rest.empty() && rest.front() < 0.0)
        throw DataError("zero bin requires nonnegative doses in dimension " + std::to_string(d));
    } else {
      rest = vals;
    }
    if (rest.empty()) {
      log::warn("action dimension " + std::to_string(d) + " has only zero doses; single zero bin");
      edges.clear();
    } else {
      std::size_t n_distinct = 1;
      for (std::size_t i = 1; i < rest.size(); ++i)
        if (rest[i] != rest[i - 1]) ++n_distinct;
      if (static_cast<int>(n_distinct) < nb)
        log::warn("action dimension " + std::to_string(d) + ": only " + std::to_string(n_distinct) +
                  " distinct values for " + std::to_string(nb) + " bins; reducing bin count");
      auto [e, r] = detail::quantile_groups(rest, nb);
      edges.insert(edges.end(), e.begin(), e.end());
      reps.insert(reps.end(), r.begin(), r.end());
    }
    out.edges.push_back(std::move(edges));
    out.representatives.push_back(std::move(reps));
  }
  return out;
}

inline ActionBinning fit_action_bins(const Dataset& ds, int n_bins, bool zero_bin) {
  return fit_action_bins(ds, std::vector<int>(static_cast<std::size_t>(ds.d_act), n_bins), zero_bin);
}

/// Episode-level random split; the first part receives floor(ratio * n) episodes.
/// File order is preserved within each part.
inline std::pair<Dataset, Dataset> split(const Dataset& ds, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must lie in (0,1)");
  const std::size_t n = ds.episodes.size();
  auto n_dev = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[uniform_index(rng, i)]);
  std::vector<bool> in_dev(n, false);
  for (std::size_t i = 0; i < n_dev; ++i) in_dev[perm[i]] = true;

  Dataset dev, test;
  for (Dataset* part : {&dev, &test}) {
    part->d_obs = ds.d_obs;
    part->d_act = ds.d_act;
    part->normalization = ds.normalization;
  }
  dev.split_tag = SplitTag::development;
  test.split_tag = SplitTag::test;
  for (std::size_t i = 0; i < n; ++i) (in_dev[i] ? dev : test).episodes.push_back(ds.episodes[i]);
  return {std::move(dev), std::move(test)};
}

}  // namespace astc
