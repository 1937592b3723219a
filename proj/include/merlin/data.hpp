#pragma once

// Synthetic data: the two-block theory distributions over {0, +-1}^d and a
// composite classification set whose first block carries class information
// that transfers and whose second block carries a source-only signature.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "merlin/rng.hpp"
#include "merlin/types.hpp"

namespace merlin {

// --- theory distributions ----------------------------------------------------

// y = 0 w.p. 1/3 (first k coordinates zero), else y = 1 (first k coordinates
// uniform +-1). Coordinates past k are uniform on {-1, 0, +1} in both cases.
struct TheorySourceSpec {
  Index k = 2;
  Index d = 2;
};

// The k = 1 case: y = x_1^2.
struct TheoryTargetSpec {
  Index d = 2;
};

namespace detail {

inline LabeledSet sample_two_block(Index k, Index d, Index n, std::uint64_t seed, const char* generator) {
  require(n >= 1, "sample count must be positive");
  Rng rng(seed);
  LabeledSet out;
  out.X.resize(n, d);
  out.y.resize(n);
  out.meta = {generator, seed};
  for (Index r = 0; r < n; ++r) {
    const bool positive = rng.uniform_int(3) != 0;
    out.y(r) = positive ? 1.0 : 0.0;
    for (Index i = 0; i < d; ++i) {
      double v = 0.0;
      if (i < k) {
        if (positive) v = rng.uniform_int(2) == 0 ? -1.0 : 1.0;
      } else {
        v = static_cast<double>(rng.uniform_int(3)) - 1.0;
      }
      out.X(r, i) = v;
    }
  }
  return out;
}

}  // namespace detail

inline LabeledSet sample_theory_source(const TheorySourceSpec& spec, Index n, std::uint64_t seed) {
  require(spec.k >= 2 && spec.k <= spec.d, "source distribution needs 2 <= k <= d");
  return detail::sample_two_block(spec.k, spec.d, n, seed, "theory_source");
}

inline LabeledSet sample_theory_target(const TheoryTargetSpec& spec, Index n, std::uint64_t seed) {
  require(spec.d >= 2, "target distribution needs d >= 2");
  return detail::sample_two_block(1, spec.d, n, seed, "theory_target");
}

// --- composite (A | B) classification data -----------------------------------

enum class Variant { AB, AOnly, BOnly, Target };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::AB: return "AB";
    case Variant::AOnly: return "A";
    case Variant::BOnly: return "B";
    case Variant::Target: return "target";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "AB") return Variant::AB;
  if (s == "A" || s == "AOnly") return Variant::AOnly;
  if (s == "B" || s == "BOnly") return Variant::BOnly;
  if (s == "target" || s == "Target") return Variant::Target;
  throw ContractError("unknown variant '" + s + "'");
}

// Block A: `d_A - a_distractors` informative dims drawn around a per-class
// prototype, plus `a_distractors` label-independent dims. Prototypes are
// uniform on [proto_low, proto_high]^k when proto_active == 0; otherwise class c gets
// `proto_active` randomly chosen dims at `proto_high` and the rest at
// `proto_low`. Informative noise is N(0, a_noise^2), distractors are
// N(0.5, distractor_std^2).
// Block B: i.i.d. N(c / C, sig_std^2). Everything is clamped to [lo, hi].
struct CompositeSpec {
  int classes = 10;
  Index d_A = 64;
  Index d_B = 64;
  double a_noise = 0.15;
  Index a_distractors = 48;
  double distractor_std = 0.15;
  Index proto_active = 0;
  double proto_low = 0.3;
  double proto_high = 0.7;
  double sig_std = 0.2;
  double clamp_lo = 0.0;
  double clamp_hi = 1.0;
  std::uint64_t proto_seed = 1;

  Index informative() const { return d_A - a_distractors; }
  Index dim() const { return d_A + d_B; }
};

inline void validate(const CompositeSpec& s) {
  require(s.classes >= 2, "composite spec needs at least 2 classes");
  require(s.d_A >= s.classes, "block A must have at least one dim per class");
  require(s.d_B >= 1, "block B must be nonempty");
  require(s.a_distractors >= 0 && s.a_distractors < s.d_A, "distractor count out of range");
  require(s.proto_active >= 0 && s.proto_active <= s.informative(), "prototype support out of range");
  require(s.sig_std > 0.0 && s.a_noise >= 0.0 && s.distractor_std >= 0.0, "noise scales must be non-negative");
  require(s.clamp_lo < s.clamp_hi, "clamp bounds must be ordered");
  require(0.0 <= s.proto_low && s.proto_low <= s.proto_high && s.proto_high <= 1.0, "prototype range must lie in [0, 1]");
}

// Class prototypes over the informative dims, C x informative().
inline Matrix composite_prototypes(const CompositeSpec& spec) {
  validate(spec);
  Rng rng(derive_seed(spec.proto_seed, 0xA));
  const Index inf = spec.informative();
  Matrix P = Matrix::Constant(spec.classes, inf, spec.proto_low);
  if (spec.proto_active == 0) {
    for (int c = 0; c < spec.classes; ++c)
      for (Index i = 0; i < inf; ++i) P(c, i) = spec.proto_low + (spec.proto_high - spec.proto_low) * rng.uniform01();
    return P;
  }
  std::vector<Index> dims(static_cast<std::size_t>(inf));
  for (int c = 0; c < spec.classes; ++c) {
    for (Index i = 0; i < inf; ++i) dims[static_cast<std::size_t>(i)] = i;
    rng.shuffle(dims);
    for (Index a = 0; a < spec.proto_active; ++a) P(c, dims[static_cast<std::size_t>(a)]) = spec.proto_high;
  }
  return P;
}

// Per-dimension mean of the generating distribution under a uniform class
// prior; used to fill masked blocks.
inline Vector composite_neutral_fill(const CompositeSpec& spec) {
  const Matrix P = composite_prototypes(spec);
  Vector fill(spec.dim());
  const Index inf = spec.informative();
  for (Index i = 0; i < inf; ++i) fill(i) = P.col(i).mean();
  for (Index i = inf; i < spec.d_A; ++i) fill(i) = 0.5;
  const double b_mean = static_cast<double>(spec.classes - 1) / (2.0 * spec.classes);
  for (Index i = spec.d_A; i < spec.dim(); ++i) fill(i) = b_mean;
  return fill;
}

// Draws n examples with uniform class labels. The A and B draws use separate
// sub-streams keyed on the seed, so AB, AOnly and BOnly with the same seed
// agree on every unmasked entry. Target uses an independent A stream.
inline LabeledSet generate_composite(const CompositeSpec& spec, Index n, std::uint64_t seed, Variant variant) {
  validate(spec);
  require(n >= 1, "sample count must be positive");
  const Matrix protos = composite_prototypes(spec);
  const Vector fill = composite_neutral_fill(spec);
  const Index inf = spec.informative();

  Rng label_rng(derive_seed(seed, 1));
  Rng a_rng(derive_seed(seed, variant == Variant::Target ? 4 : 2));
  Rng b_rng(derive_seed(seed, 3));

  LabeledSet out;
  out.X.resize(n, spec.dim());
  out.y.resize(n);
  out.num_classes = spec.classes;
  out.meta = {"composite_" + to_string(variant), seed};

  const bool keep_a = variant != Variant::BOnly;
  const bool keep_b = variant == Variant::AB || variant == Variant::BOnly;
  auto clamp = [&](double v) { return std::clamp(v, spec.clamp_lo, spec.clamp_hi); };

  for (Index r = 0; r < n; ++r) {
    const int c = static_cast<int>(label_rng.uniform_int(static_cast<std::uint64_t>(spec.classes)));
    out.y(r) = c;
    for (Index i = 0; i < spec.d_A; ++i) {
      const double v = i < inf ? protos(c, i) + spec.a_noise * a_rng.normal()
                               : 0.5 + spec.distractor_std * a_rng.normal();
      out.X(r, i) = keep_a ? clamp(v) : fill(i);
    }
    const double mean_b = static_cast<double>(c) / spec.classes;
    for (Index i = 0; i < spec.d_B; ++i) {
      const double v = b_rng.normal(mean_b, spec.sig_std);
      out.X(r, spec.d_A + i) = keep_b ? clamp(v) : fill(spec.d_A + i);
    }
  }
  return out;
}

// --- splitting ---------------------------------------------------------------

struct SplitIndices {
  std::vector<Index> train;
  std::vector<Index> val;
};

inline SplitIndices split_indices(Index n, double fraction, std::uint64_t seed) {
  require(fraction > 0.0 && fraction < 1.0, "split fraction must lie in (0, 1)");
  const auto n_train = static_cast<Index>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
  require(n_train >= 1 && n_train < n, "split would leave an empty part");
  std::vector<Index> perm(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
  Rng rng(seed);
  rng.shuffle(perm);
  SplitIndices s;
  s.train.assign(perm.begin(), perm.begin() + n_train);
  s.val.assign(perm.begin() + n_train, perm.end());
  return s;
}

inline std::pair<LabeledSet, LabeledSet> split(const LabeledSet& set, double fraction, std::uint64_t seed) {
  const SplitIndices s = split_indices(set.size(), fraction, seed);
  return {set.subset(s.train), set.subset(s.val)};
}

}  // namespace merlin
