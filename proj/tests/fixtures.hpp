#pragma once

#include "astc/astc.hpp"

namespace astc::testing {

inline Vec random_simplex(Rng& rng, int n) {
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = -std::log(std::max(uniform01(rng), 1e-300));
  return v / v.sum();
}

/// Random planning model: stochastic T rows over K+2 columns, K x K channel,
/// rewards uniform in [r_lo, r_hi], gamma uniform in [0.5, 0.95].
inline PomdpModel random_pomdp(Rng& rng, int K, int n_actions, double r_lo = -1.0, double r_hi = 1.0) {
  PomdpModel m;
  m.K = K;
  m.n_actions = n_actions;
  for (int a = 0; a < n_actions; ++a) {
    Mat t(K, K + 2);
    Vec r(K);
    for (int s = 0; s < K; ++s) {
      t.row(s) = random_simplex(rng, K + 2).transpose();
      r[s] = r_lo + (r_hi - r_lo) * uniform01(rng);
    }
    m.T.push_back(t);
    m.R.push_back(r);
  }
  m.C.resize(K, K);
  for (int s = 0; s < K; ++s) m.C.row(s) = random_simplex(rng, K).transpose();
  m.state_prior = random_simplex(rng, K);
  m.gamma = 0.5 + 0.45 * uniform01(rng);
  m.validate();
  return m;
}

}  // namespace astc::testing
