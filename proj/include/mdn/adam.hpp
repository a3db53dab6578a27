#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mdn/error.hpp"
#include "mdn/types.hpp"

namespace mdn {

struct AdamOptions {
  double lr = 1e-3;
  double weight_decay = 5e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Mat> m;
  std::vector<Mat> v;
  std::int64_t step = 0;
};

/// One Adam update with decoupled weight decay:
///   p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * weight_decay * p
inline void adam_step(const std::vector<Mat*>& params, const std::vector<Mat>& grads,
                      AdamState& state, const AdamOptions& opt) {
  MDN_CHECK(params.size() == grads.size(), ErrorCode::kInvalidArgument,
            "adam_step: parameter/gradient count mismatch");
  MDN_CHECK(opt.lr >= 0.0 && opt.weight_decay >= 0.0, ErrorCode::kInvalidArgument,
            "adam_step: negative learning rate or weight decay");
  if (state.m.empty()) {
    for (const Mat* p : params) {
      state.m.push_back(Mat::Zero(p->rows(), p->cols()));
      state.v.push_back(Mat::Zero(p->rows(), p->cols()));
    }
  }
  MDN_CHECK(state.m.size() == params.size(), ErrorCode::kInvalidArgument,
            "adam_step: optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    MDN_CHECK(params[i]->rows() == grads[i].rows() && params[i]->cols() == grads[i].cols() &&
                  state.m[i].rows() == grads[i].rows() && state.m[i].cols() == grads[i].cols(),
              ErrorCode::kInvalidArgument, "adam_step: shape mismatch for tensor " + std::to_string(i));
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Mat& p = *params[i];
    state.m[i] = opt.beta1 * state.m[i] + (1.0 - opt.beta1) * grads[i];
    state.v[i] = opt.beta2 * state.v[i] + (1.0 - opt.beta2) * grads[i].cwiseProduct(grads[i]);
    const auto m_hat = state.m[i].array() / bc1;
    const auto v_hat = state.v[i].array() / bc2;
    p.array() -= opt.lr * (m_hat / (v_hat.sqrt() + opt.eps)) + opt.lr * opt.weight_decay * p.array();
  }
}

}  // namespace mdn
