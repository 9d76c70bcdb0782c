#include "editkit/diffusion.hpp"

#include <cmath>
#include <string>

namespace editkit::diffusion {

namespace {

void check_t(const NoiseSchedule& s, int t) {
  if (t < 1 || t > s.T()) throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, T]");
}

void check_same_shape(const MatrixD& a, const MatrixD& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("shape mismatch");
}

}  // namespace

double NoiseSchedule::beta(int t) const {
  check_t(*this, t);
  return betas_[t - 1];
}

double NoiseSchedule::alpha(int t) const { return 1.0 - beta(t); }

double NoiseSchedule::alpha_bar(int t) const {
  if (t == 0) return 1.0;
  check_t(*this, t);
  return alpha_bars_[t - 1];
}

NoiseSchedule make_schedule(int T, double beta_min, double beta_max) {
  if (T < 2) throw std::invalid_argument("schedule needs T >= 2");
  if (!(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0))
    throw std::invalid_argument("schedule needs 0 < beta_min < beta_max < 1");
  NoiseSchedule s;
  s.betas_.resize(T);
  s.alpha_bars_.resize(T);
  double prod = 1.0;
  for (int i = 0; i < T; ++i) {
    s.betas_[i] = beta_min + (beta_max - beta_min) * i / (T - 1);
    prod *= 1.0 - s.betas_[i];
    s.alpha_bars_[i] = prod;
  }
  return s;
}

MatrixD q_sample(const NoiseSchedule& sched, const MatrixD& w0, int t, const MatrixD& eps) {
  check_same_shape(w0, eps);
  const double ab = sched.alpha_bar(t);
  check_t(sched, t);
  return std::sqrt(ab) * w0 + std::sqrt(1.0 - ab) * eps;
}

MatrixD predict_x0(const NoiseSchedule& sched, const MatrixD& w_t, int t, const MatrixD& eps_hat) {
  check_t(sched, t);
  check_same_shape(w_t, eps_hat);
  const double ab = sched.alpha_bar(t);
  return (w_t - std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(ab);
}

MatrixD ddim_step(const NoiseSchedule& sched, const MatrixD& w_t, int t, int t_prev,
                  const MatrixD& eps_hat) {
  if (t_prev >= t) throw std::invalid_argument("ddim_step requires t_prev < t");
  if (t_prev < 0) throw std::out_of_range("t_prev must be >= 0");
  const MatrixD x0 = predict_x0(sched, w_t, t, eps_hat);
  if (t_prev == 0) return x0;
  const double ab_prev = sched.alpha_bar(t_prev);
  return std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps_hat;
}

MatrixD cfg_compose(const MatrixD& eps_uncond, const MatrixD& eps_img, const MatrixD& eps_full,
                    GuidanceScales scales) {
  check_same_shape(eps_uncond, eps_img);
  check_same_shape(eps_uncond, eps_full);
  if (!std::isfinite(scales.image) || !std::isfinite(scales.text))
    throw std::invalid_argument("guidance scales must be finite");
  // Corner cases are taken literally so the telescoping identities hold bit-exactly.
  if (scales.image == 1.0 && scales.text == 1.0) return eps_full;
  if (scales.image == 0.0 && scales.text == 0.0) return eps_uncond;
  if (scales.image == 1.0 && scales.text == 0.0) return eps_img;
  return eps_uncond + scales.image * (eps_img - eps_uncond) + scales.text * (eps_full - eps_img);
}

DDIMPlan make_plan(const NoiseSchedule& sched, int t_start, int steps) {
  if (t_start < 1 || t_start > sched.T()) throw std::out_of_range("t_start outside [1, T]");
  if (steps < 1) throw std::invalid_argument("plan needs at least one step");
  if (steps > t_start) throw std::invalid_argument("more DDIM steps than timesteps below t_start");
  DDIMPlan plan;
  for (int i = 0; i < steps; ++i) {
    const int t = static_cast<int>(std::lround(static_cast<double>(t_start) * (steps - i) / steps));
    plan.timesteps.push_back(t);
  }
  return plan;
}

}  // namespace editkit::diffusion
