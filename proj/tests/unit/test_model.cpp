#include <doctest.h>

#include <cmath>

#include "attnlab/st_model.hpp"
#include "attnlab/synth.hpp"

using namespace attnlab;

namespace {

SynthResult tiny_world(int roads = 3, int days = 2) {
  SynthConfig c;
  c.roads_per_cluster = {roads};
  c.days = days;
  return synth_generate(c, 7);
}

ModelConfig tiny_config() {
  ModelConfig m;
  m.heads = 2;
  m.width = 8;
  m.ffn_width = 8;
  m.seed = 3;
  return m;
}

}  // namespace

TEST_CASE("model gradient matches central differences") {
  const auto w = tiny_world();
  auto model = init_model(tiny_config(), w.network, w.panel);
  const std::vector<std::size_t> origins{40, 300};
  std::vector<ad::Matrix> grad;
  loss_and_gradient(model, w.panel, origins, &grad);
  REQUIRE(grad.size() == model.params.size());

  const double h = 1e-6;
  double worst = 0.0;
  for (std::size_t p = 0; p < model.params.size(); ++p) {
    auto& param = model.params[p];
    for (Eigen::Index k = 0; k < param.size(); k += std::max<Eigen::Index>(1, param.size() / 5)) {
      const double keep = param.data()[k];
      param.data()[k] = keep + h;
      const double up = loss_and_gradient(model, w.panel, origins, nullptr);
      param.data()[k] = keep - h;
      const double down = loss_and_gradient(model, w.panel, origins, nullptr);
      param.data()[k] = keep;
      const double numeric = (up - down) / (2 * h);
      const double analytic = grad[p].data()[k];
      const double rel = std::abs(numeric - analytic) / std::max({1e-6, std::abs(numeric), std::abs(analytic)});
      worst = std::max(worst, rel);
    }
  }
  MESSAGE("max relative error ", worst);
  CHECK(worst < 1e-4);
}
