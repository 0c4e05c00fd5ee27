#include "microface/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace microface {

namespace {

struct Probe {
  double value;
  std::uint64_t branch;
};

Probe probe(const ScalarFn& f, const Tensor<double>& x, const ParameterSet<double>* params) {
  Graph<double> g(params);
  const double v = f(g, g.constant(x)).value().item();
  if (!std::isfinite(v)) throw NumericError("gradcheck: function returned a non-finite value at a probe");
  return {v, g.branch_signature()};
}

Probe probe(const ParamLossFn& f, const ParameterSet<double>& params) {
  Graph<double> g(&params);
  const double v = f(g).value().item();
  if (!std::isfinite(v)) throw NumericError("gradcheck: function returned a non-finite value at a probe");
  return {v, g.branch_signature()};
}

}  // namespace

double relative_error(double analytic, double central, double floor) {
  return std::abs(analytic - central) / std::max(std::abs(analytic) + std::abs(central), floor);
}

double gradcheck_floor(double value) { return 1e-6 * std::max(1.0, std::abs(value)); }

namespace {

// A stencil that straddles a kink (a ReLU changing sign) does not estimate the derivative; the step is
// shrunk until every probe stays on the branch of the base point, at most 6 times by a factor of 4.
template <typename Eval>
double central_difference(double& slot, double eps, std::uint64_t branch, Eval&& eval) {
  const double keep = slot;
  double f[4];
  const double steps[4] = {-2, -1, 1, 2};
  double h = eps;
  for (int attempt = 0; attempt < 7; ++attempt, h *= 0.25) {
    bool same = true;
    for (int k = 0; k < 4; ++k) {
      slot = keep + steps[k] * h;
      const Probe p = eval();
      f[k] = p.value;
      same = same && p.branch == branch;
    }
    if (same) break;
  }
  slot = keep;
  return (f[0] - 8 * f[1] + 8 * f[2] - f[3]) / (12 * h);
}

}  // namespace

double finite_diff_gradcheck(const ScalarFn& f, const Tensor<double>& x, double eps,
                             const ParameterSet<double>* params) {
  Graph<double> g(params);
  auto xv = g.leaf(x);
  auto loss = f(g, xv);
  if (!std::isfinite(loss.value().item())) throw NumericError("gradcheck: function is non-finite at x");
  g.backward(loss);
  const Tensor<double> analytic = g.grad(xv);
  const double floor = gradcheck_floor(loss.value().item());
  const std::uint64_t branch = g.branch_signature();
  double worst = 0.0;
  Tensor<double> probe_x = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double c = central_difference(probe_x[i], eps, branch, [&] { return probe(f, probe_x, params); });
    worst = std::max(worst, relative_error(analytic[i], c, floor));
  }
  return worst;
}

GradcheckReport gradcheck_parameters(const ParamLossFn& f, ParameterSet<double>& params, double eps,
                                     std::size_t max_probes, std::uint64_t seed) {
  GradientMap<double> analytic;
  double floor = 0;
  std::uint64_t branch = 0;
  {
    Graph<double> g(&params);
    auto loss = f(g);
    if (!std::isfinite(loss.value().item())) throw NumericError("gradcheck: loss is non-finite");
    analytic = gradients(g, loss);
    floor = gradcheck_floor(loss.value().item());
    branch = g.branch_signature();
  }
  std::mt19937_64 rng(seed);
  GradcheckReport report;
  for (const auto& name : params.names()) {
    Tensor<double>& p = params.get_mut(name);
    std::vector<std::size_t> order(p.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(std::min(order.size(), max_probes));
    for (std::size_t i : order) {
      const double c = central_difference(p[i], eps, branch, [&] { return probe(f, params); });
      const double err = relative_error(analytic.at(name)[i], c, floor);
      ++report.probes;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        std::ostringstream w;
        w << name << "[" << i << "] analytic " << analytic.at(name)[i] << " numeric " << c;
        report.worst = w.str();
      }
    }
  }
  return report;
}

}  // namespace microface
