#include "moca/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "moca/errors.hpp"

namespace moca {
namespace {

// Sums in sorted order so permutations of the input give identical bits.
Scalar ordered_sum(std::vector<Scalar> v) {
  std::sort(v.begin(), v.end());
  Scalar s = 0;
  for (Scalar x : v) s += x;
  return s;
}

}  // namespace

Scalar rmse(std::span<const Scalar> estimates, Scalar truth) {
  if (estimates.empty()) throw UsageError("rmse: no replicates");
  std::vector<Scalar> sq;
  sq.reserve(estimates.size());
  for (Scalar e : estimates) sq.push_back((e - truth) * (e - truth));
  return std::sqrt(ordered_sum(std::move(sq)) / static_cast<Scalar>(estimates.size()));
}

Summary summarize(std::span<const Scalar> values) {
  if (values.empty()) throw UsageError("summary: no values");
  std::vector<Scalar> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  Summary s;
  s.count = static_cast<Index>(v.size());
  s.mean = ordered_sum(v) / static_cast<Scalar>(v.size());
  const std::size_t mid = v.size() / 2;
  s.median = v.size() % 2 == 1 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
  if (v.size() > 1) {
    std::vector<Scalar> dev;
    dev.reserve(v.size());
    for (Scalar x : v) dev.push_back((x - s.mean) * (x - s.mean));
    s.sd = std::sqrt(ordered_sum(std::move(dev)) / static_cast<Scalar>(v.size() - 1));
  }
  return s;
}

Scalar cate_rmse(const Vector& predicted, const Vector& truth) {
  if (predicted.size() != truth.size()) {
    throw DimensionError("cate_rmse: lengths differ (" + std::to_string(predicted.size()) + " vs " +
                         std::to_string(truth.size()) + ")");
  }
  if (predicted.size() == 0) throw UsageError("cate_rmse: empty vectors");
  return std::sqrt((predicted - truth).squaredNorm() / static_cast<Scalar>(predicted.size()));
}

Scalar within_run_variance(const Vector& cate) {
  const Index n = cate.size();
  if (n < 2) throw UsageError("within-run variance needs at least 2 units");
  const Scalar m = cate.mean();
  const Scalar ss = (cate.array() - m).square().sum();
  return ss / static_cast<Scalar>(n - 1) / static_cast<Scalar>(n);
}

PooledEstimate rubin_pool(std::span<const RunEstimate> runs) {
  const std::size_t m = runs.size();
  if (m < 2) throw UsageError("pooling needs at least 2 runs, got " + std::to_string(m));
  std::vector<Scalar> taus, us;
  for (const RunEstimate& r : runs) {
    taus.push_back(r.tau);
    us.push_back(r.within);
  }
  PooledEstimate p;
  const Scalar md = static_cast<Scalar>(m);
  p.runs = static_cast<Index>(m);
  p.tau_bar = ordered_sum(taus) / md;
  p.within = ordered_sum(us) / md;
  std::vector<Scalar> dev;
  for (Scalar t : taus) dev.push_back((t - p.tau_bar) * (t - p.tau_bar));
  p.between = ordered_sum(std::move(dev)) / (md - 1);
  p.total = p.within + (1.0 + 1.0 / md) * p.between;
  const Scalar half = kNormalQuantile975 * std::sqrt(p.total);
  p.ci_low = p.tau_bar - half;
  p.ci_high = p.tau_bar + half;
  return p;
}

}  // namespace moca
