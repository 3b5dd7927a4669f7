#include <gtest/gtest.h>

#include "support.hpp"

using namespace modalseg;
using namespace modalseg::testing;

namespace {

class LossGradient : public ::testing::TestWithParam<CheckedLoss> {};

TEST_P(LossGradient, MatchesCentralDifferences) {
  const GradientCheck r = check_gradients(make_gradient_problem(), GetParam());
  EXPECT_GT(r.checked, 900u);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.loss << " worst at " << r.worst;
}

INSTANTIATE_TEST_SUITE_P(AllLosses, LossGradient,
                         ::testing::Values(CheckedLoss::seg_full, CheckedLoss::seg_drop, CheckedLoss::d_loss,
                                           CheckedLoss::g_loss),
                         [](const auto& info) {
                           switch (info.param) {
                             case CheckedLoss::seg_full: return std::string("SegFull");
                             case CheckedLoss::seg_drop: return std::string("SegDrop");
                             case CheckedLoss::d_loss: return std::string("DLoss");
                             case CheckedLoss::g_loss: return std::string("GLoss");
                           }
                           return std::string("Unknown");
                         });

TEST(LossGradient, SmoothActivationVariant) {
  GradientProblem g = make_gradient_problem(3);
  g.model.config.activation.kind = ops::ActivationKind::tanh;
  for (auto which : {CheckedLoss::seg_full, CheckedLoss::g_loss}) {
    const GradientCheck r = check_gradients(g, which);
    EXPECT_LT(r.max_rel_error, 1e-4) << r.loss << " worst at " << r.worst;
  }
}

TEST(DiscriminatorGradient, InputGradientMatchesDifferences) {
  const GradientProblem g = make_gradient_problem(2);
  Tensor<double> f0 = random_images<double>(g.disc.config.in_channels, 3, g.disc.config.height, g.disc.config.width, 77);
  const auto pass = discriminator_pass(g.disc, f0);
  const std::vector<double> ones(3, 1.0);
  Tensor<double> grad = Tensor<double>::zeros_like(f0);
  discriminator_backward(g.disc, pass, std::span<const double>(ones), std::span<double>(), &grad);
  auto logit_sum = [&](const Tensor<double>& x) {
    const auto p = discriminator_pass(g.disc, x);
    double s = 0;
    for (double z : p.logits) s += z;
    return s;
  };
  const double h = 1e-5;
  double worst = 0;
  for (std::size_t i = 0; i < f0.data.size(); ++i) {
    const double keep = f0.data[i];
    f0.data[i] = keep + h;
    const double up = logit_sum(f0);
    f0.data[i] = keep - h;
    const double down = logit_sum(f0);
    f0.data[i] = keep;
    worst = std::max(worst, relative_error(grad.data[i], (up - down) / (2 * h)));
  }
  EXPECT_LT(worst, 1e-4);
}

}  // namespace
