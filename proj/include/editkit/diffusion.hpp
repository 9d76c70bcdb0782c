#pragma once

#include "editkit/common.hpp"

#include <vector>

namespace editkit::diffusion {

/// Linear-beta DDPM schedule. Index t runs 1..T; alpha_bar(0) == 1.
class NoiseSchedule {
 public:
  int T() const { return static_cast<int>(betas_.size()); }
  double beta(int t) const;
  double alpha(int t) const;
  double alpha_bar(int t) const;  // t in [0, T]
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }

  friend NoiseSchedule make_schedule(int T, double beta_min, double beta_max);

 private:
  std::vector<double> betas_;
  std::vector<double> alpha_bars_;  // alpha_bars_[t-1] for t = 1..T
};

NoiseSchedule make_schedule(int T = 1000, double beta_min = 1e-4, double beta_max = 0.02);

/// sqrt(abar_t) w0 + sqrt(1 - abar_t) eps.
MatrixD q_sample(const NoiseSchedule& sched, const MatrixD& w0, int t, const MatrixD& eps);

/// (w_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t).
MatrixD predict_x0(const NoiseSchedule& sched, const MatrixD& w_t, int t, const MatrixD& eps_hat);

/// Deterministic (eta = 0) DDIM update from t to t_prev < t.
MatrixD ddim_step(const NoiseSchedule& sched, const MatrixD& w_t, int t, int t_prev,
                  const MatrixD& eps_hat);

struct GuidanceScales {
  double image = 1.0;  // s_I
  double text = 2.0;   // s_T
};

/// eps_u + s_I (eps_img - eps_u) + s_T (eps_full - eps_img).
MatrixD cfg_compose(const MatrixD& eps_uncond, const MatrixD& eps_img, const MatrixD& eps_full,
                    GuidanceScales scales);

/// Strictly decreasing timesteps; the sampler steps from timesteps[i] to
/// timesteps[i+1], and from the last entry to 0.
struct DDIMPlan {
  std::vector<int> timesteps;

  int start() const { return timesteps.front(); }
  int prev(size_t i) const { return i + 1 < timesteps.size() ? timesteps[i + 1] : 0; }
};

/// `steps` evenly spaced timesteps from t_start down towards 0.
DDIMPlan make_plan(const NoiseSchedule& sched, int t_start, int steps = 15);

}  // namespace editkit::diffusion
