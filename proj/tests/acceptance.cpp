// SPDX-License-Identifier: Apache-2.0
// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails.

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "unimatch/unimatch.hpp"

using namespace unimatch;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool ok = true;
  std::string detail;
  std::vector<std::string> failures;

  void expect(bool cond, const std::string& what) {
    if (cond) return;
    ok = false;
    if (failures.size() < 5) failures.push_back(what);
  }
};

ad::Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, bool rg = true, double lo = -1.0, double hi = 1.0) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  std::vector<double> v(n);
  for (double& x : v) x = uniform(rng, lo, hi);
  return ad::Tensor::from(std::move(shape), std::move(v), rg);
}

double rel_error(double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-3}); }

using Build = std::function<ad::Tensor(const std::vector<ad::Tensor>&)>;

double max_fd_error(const Build& build, const std::vector<ad::Tensor>& leaves, double h = 1e-5) {
  const ad::Gradients g = ad::backward(build(leaves));
  double worst = 0.0;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    const std::vector<double> analytic = g.of(leaves[k]);
    const std::vector<double> base(leaves[k].values().begin(), leaves[k].values().end());
    for (std::size_t i = 0; i < base.size(); ++i) {
      auto at = [&](double delta) {
        std::vector<ad::Tensor> moved = leaves;
        std::vector<double> v = base;
        v[i] += delta;
        moved[k] = ad::Tensor::from(leaves[k].shape(), v, true);
        return build(moved).item();
      };
      worst = std::max(worst, rel_error(analytic[i], (at(h) - at(-h)) / (2.0 * h)));
    }
  }
  return worst;
}

std::shared_ptr<const smiles::MolGraph> graph(const std::string& s) {
  return std::make_shared<const smiles::MolGraph>(smiles::mol_from_smiles(s));
}

LabeledSet labeled(const std::vector<std::pair<std::string, int>>& items) {
  LabeledSet out;
  for (std::size_t i = 0; i < items.size(); ++i) out.push_back({graph(items[i].first), items[i].second, i});
  return out;
}

void jitter(ModelParams& p, std::uint64_t seed) {
  Rng rng(seed);
  visit_model(p, [&](const std::string&, ParamTensor& t) {
    for (double& v : t.values) v += uniform(rng, -0.1, 0.1);
  });
}

std::vector<double> all_values(const ModelParams& p) {
  std::vector<double> out;
  visit_model(p, [&](const std::string&, const ParamTensor& t) { out.insert(out.end(), t.values.begin(), t.values.end()); });
  return out;
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// --- 1 -------------------------------------------------------------------------------

Outcome gradient_fidelity() {
  Outcome o;
  const auto t0 = Clock::now();
  struct OpCase {
    std::string name;
    Build op;
    std::function<std::vector<ad::Tensor>(Rng&)> leaves;
  };
  const ad::Tensor onehot = ad::Tensor::matrix(4, 2, {1, 0, 0, 1, 0, 1, 1, 0});
  const std::vector<OpCase> ops = {
      {"matmul", [](const auto& l) { return ad::matmul(l[0], l[1]); },
       [](Rng& r) { return std::vector{random_tensor({3, 4}, r), random_tensor({4, 5}, r)}; }},
      {"transpose", [](const auto& l) { return ad::transpose(l[0]); },
       [](Rng& r) { return std::vector{random_tensor({3, 4}, r)}; }},
      {"add/add_row", [](const auto& l) { return ad::add_row(ad::add(l[0], l[1]), l[2]); },
       [](Rng& r) { return std::vector{random_tensor({3, 4}, r), random_tensor({3, 4}, r), random_tensor({4}, r)}; }},
      {"mul/scale/scale_by", [](const auto& l) { return ad::scale_by(ad::scale(ad::mul(l[0], l[1]), -1.7), l[2]); },
       [](Rng& r) { return std::vector{random_tensor({2, 5}, r), random_tensor({2, 5}, r), random_tensor({1}, r)}; }},
      {"relu", [](const auto& l) { return ad::relu(l[0]); }, [](Rng& r) { return std::vector{random_tensor({4, 6}, r)}; }},
      {"clamp_unit", [](const auto& l) { return ad::clamp_unit(l[0]); },
       [](Rng& r) { return std::vector{random_tensor({3, 4}, r, true, 0.05, 0.95)}; }},
      {"concat_cols", [](const auto& l) { return ad::concat_cols({l[0], l[1]}); },
       [](Rng& r) { return std::vector{random_tensor({3, 2}, r), random_tensor({3, 1}, r)}; }},
      {"gather_rows", [](const auto& l) { return ad::gather_rows(l[0], {2, 0, 2, 1}); },
       [](Rng& r) { return std::vector{random_tensor({3, 4}, r)}; }},
      {"segment_sum", [](const auto& l) { return ad::segment_sum(l[0], {0, 1, 1, 2, 0}, 3); },
       [](Rng& r) { return std::vector{random_tensor({5, 3}, r)}; }},
      {"segment_mean", [](const auto& l) { return ad::segment_mean(l[0], {0, 1, 1, 2, 0}, 3); },
       [](Rng& r) { return std::vector{random_tensor({5, 3}, r)}; }},
      {"softmax_rows", [](const auto& l) { return ad::softmax_rows(l[0]); },
       [](Rng& r) { return std::vector{random_tensor({4, 5}, r, true, -3.0, 3.0)}; }},
      {"cross_entropy", [&](const auto& l) { return ad::cross_entropy(ad::softmax_rows(l[0]), onehot); },
       [](Rng& r) { return std::vector{random_tensor({4, 2}, r, true, -2.0, 2.0)}; }},
      {"dropout", [](const auto& l) {
         Rng mask(99);
         return ad::dropout(l[0], 0.3, mask, true);
       },
       [](Rng& r) { return std::vector{random_tensor({5, 4}, r)}; }},
  };
  double worst = 0.0;
  for (const OpCase& c : ops)
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(seed);
      const auto leaves = c.leaves(rng);
      const double e = max_fd_error(
          [&](const std::vector<ad::Tensor>& l) {
            const ad::Tensor out = c.op(l);
            Rng w(seed ^ 0xabcdefULL);
            return ad::sum(ad::mul(out, random_tensor(out.shape(), w, false)));
          },
          leaves);
      worst = std::max(worst, e);
      o.expect(e < 1e-4, c.name + " seed " + std::to_string(seed) + " rel err " + std::to_string(e));
    }

  const auto support = labeled({{"CCO", 1}, {"c1ccccc1O", 1}, {"CCC", 0}, {"CCN", 0}, {"C1CCC1Cl", 1}});
  const auto query = labeled({{"OCC(N)C=O", 1}, {"CC#N", 0}, {"CC(C)(C)O", 1}, {"CBr", 0}});
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.hidden = 4;
    ModelParams p = init_params(cfg, seed);
    jitter(p, seed + 100);
    std::vector<ad::Tensor> leaves;
    visit_model(p, [&](const std::string&, const ParamTensor& t) { leaves.push_back(t.bind(true)); });
    const double e = max_fd_error(
        [&](const std::vector<ad::Tensor>& l) {
          EncoderTensors enc;
          enc.layers.resize(p.encoder.layers.size());
          MatchTensors w;
          w.wq.resize(p.matcher.wq.size());
          w.wk.resize(p.matcher.wk.size());
          std::size_t k = 0;
          zip_encoder(p.encoder, enc, [&](const ParamTensor&, ad::Tensor& dst) { dst = l[k++]; });
          zip_matcher(p.matcher, w, [&](const ParamTensor&, ad::Tensor& dst) { dst = l[k++]; });
          return episode_loss(query, support, enc, w, {}, {});
        },
        leaves);
    worst = std::max(worst, e);
    o.expect(e < 1e-4, "episode loss seed " + std::to_string(seed) + " rel err " + std::to_string(e));
  }
  const double secs = seconds_since(t0);
  o.expect(secs < 120.0, "runtime " + std::to_string(secs) + " s exceeds 120 s");
  std::ostringstream d;
  d << "max rel err " << worst << " over " << ops.size() << " ops + episode loss x 10 seeds, " << secs << " s";
  o.detail = d.str();
  return o;
}

// --- 2 -------------------------------------------------------------------------------

Outcome matching_invariants() {
  Outcome o;
  const auto t0 = Clock::now();
  Rng rng(2024);
  double worst_row = 0.0, worst_perm = 0.0;
  std::size_t singles = 0;
  for (int episode = 0; episode < 1000; ++episode) {
    const std::size_t layers = 1 + uniform_index(rng, 5), d = 2 + uniform_index(rng, 8);
    const std::size_t ns = episode % 10 == 0 ? 1 : 1 + uniform_index(rng, 12), nq = 1 + uniform_index(rng, 8);
    std::vector<ad::Tensor> zs, zq;
    for (std::size_t l = 0; l < layers; ++l) {
      zs.push_back(random_tensor({ns, d}, rng, false, -3.0, 3.0));
      zq.push_back(random_tensor({nq, d}, rng, false, -3.0, 3.0));
    }
    MatchTensors w;
    const bool share = episode % 2 == 0;
    for (std::size_t i = 0; i < (share ? 1 : layers); ++i) {
      w.wq.push_back(random_tensor({d, d}, rng, false));
      w.wk.push_back(random_tensor({d, d}, rng, false));
    }
    w.wo = random_tensor({layers, 2}, rng, false, -2.0, 2.0);
    w.bias = random_tensor({2}, rng, false);
    std::vector<int> y(ns);
    for (int& v : y) v = static_cast<int>(uniform_index(rng, 2));

    const Prediction pred = match_and_fuse(zs, y, zq, w);
    singles += ns == 1;
    for (const LayerPrediction& lp : pred.layers)
      for (std::size_t i = 0; i < nq; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < ns; ++j) s += lp.attention.at(i, j);
        worst_row = std::max(worst_row, std::abs(s - 1.0));
        const double yh = lp.y_hat.at(i, 0);
        o.expect(yh >= 0.0 && yh <= 1.0, "y_hat outside [0,1] in episode " + std::to_string(episode));
        if (ns == 1) o.expect(yh == static_cast<double>(y[0]), "single-support episode did not return its label");
      }

    std::vector<std::size_t> perm(ns);
    std::iota(perm.begin(), perm.end(), 0);
    shuffle(perm, rng);
    std::vector<ad::Tensor> zs_perm;
    for (const ad::Tensor& z : zs) zs_perm.push_back(ad::gather_rows(z, perm));
    std::vector<int> y_perm;
    for (std::size_t j : perm) y_perm.push_back(y[j]);
    const Prediction again = match_and_fuse(zs_perm, y_perm, zq, w);
    for (std::size_t i = 0; i < pred.probs.size(); ++i)
      worst_perm = std::max(worst_perm, std::abs(pred.probs[i] - again.probs[i]));
  }
  const double secs = seconds_since(t0);
  o.expect(worst_row < 1e-9, "attention row sum deviates by " + std::to_string(worst_row));
  o.expect(worst_perm < 1e-10, "permutation changed probabilities by " + std::to_string(worst_perm));
  o.expect(secs < 60.0, "runtime " + std::to_string(secs) + " s exceeds 60 s");
  std::ostringstream d;
  d << "1000 episodes (" << singles << " single-support); max |row sum - 1| " << worst_row << ", max perm diff "
    << worst_perm << ", " << secs << " s";
  o.detail = d.str();
  return o;
}

// --- 3 -------------------------------------------------------------------------------

Outcome inner_loop_exactness() {
  Outcome o;
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.hidden = 4;
  cfg.match_dropout = 0.0;
  const auto s = labeled({{"CCO", 1}, {"CCC", 0}, {"c1ccccc1O", 1}});
  const auto q = labeled({{"OCCO", 1}, {"CCCC", 0}, {"CCN", 0}});

  {
    const ModelParams p = init_params(cfg, 1);
    TrainConfig t;
    t.inner_lr = 0.0;
    const AdaptedParams a = inner_adapt(p.encoder, p.matcher, s, q, cfg, t, 5, true);
    o.expect(bitwise_equal(flatten(a.w), flatten(p.matcher)), "alpha = 0 changed w");
  }

  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ModelParams p = init_params(cfg, seed);
    jitter(p, seed + 50);
    TrainConfig t;
    t.inner_steps = 1;
    const AdaptedParams a = inner_adapt(p.encoder, p.matcher, s, q, cfg, t, seed, false);
    GraphList all = graphs_of(s);
    for (const auto& g : graphs_of(q)) all.push_back(g);
    const MultiLevelEmbedding emb = encode_multilevel(make_batch(all), bind(p.encoder, false));
    const auto zs = select_rows(emb, {0, 1, 2});
    const auto zq = select_rows(emb, {3, 4, 5});
    auto loss_at = [&](const std::vector<double>& flat) {
      return episode_loss(match_and_fuse(zs, labels_of(s), zq, bind(unflatten(flat, p.matcher), false)).probs,
                          labels_of(q))
          .item();
    };
    std::vector<double> x = flatten(p.matcher);
    const std::vector<double> after = flatten(a.w);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double x0 = x[i];
      x[i] = x0 + 1e-5;
      const double up = loss_at(x);
      x[i] = x0 - 1e-5;
      const double down = loss_at(x);
      x[i] = x0;
      const double e = rel_error((x0 - after[i]) / t.inner_lr, (up - down) / 2e-5);
      worst = std::max(worst, e);
    }
  }
  o.expect(worst < 1e-4, "single inner step rel err " + std::to_string(worst));

  {
    ModelConfig big;
    big.layers = 2;
    big.hidden = 5;
    const ModelParams p = init_params(big, 2);
    const std::vector<double> before = all_values(p);
    const auto s4 = labeled({{"CCO", 1}, {"CCC", 0}, {"OCCO", 1}, {"CCCC", 0}});
    const auto q2 = labeled({{"CO", 1}, {"CC", 0}});
    inner_adapt(p.encoder, p.matcher, s4, q2, big, TrainConfig{}, 4, true);
    o.expect(bitwise_equal(all_values(p), before), "inner_adapt modified theta");
    finetune_and_predict(p, s4, graphs_of(q2), big, TrainConfig{}, 4, true);
    o.expect(bitwise_equal(all_values(p), before), "finetune_and_predict modified theta");
  }
  std::ostringstream d;
  d << "alpha=0 bitwise identity; single-step max rel err " << worst << "; theta bitwise untouched";
  o.detail = d.str();
  return o;
}

// --- 4 -------------------------------------------------------------------------------

double pair_auroc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins2 = 0.0, pos = 0.0, neg = 0.0;
  for (int v : y) (v == 1 ? pos : neg) += 1.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) wins2 += s[i] > s[j] ? 2.0 : (s[i] == s[j] ? 1.0 : 0.0);
  return (wins2 / 2.0) / (pos * neg);
}

double sweep_auprc(const std::vector<double>& s, const std::vector<int>& y) {
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto at = order.begin();
    while (at != order.end() && s[*at] >= s[i]) ++at;
    order.insert(at, i);
  }
  std::size_t n_pos = 0;
  for (int v : y) n_pos += v == 1;
  double ap = 0.0, prev_r = 0.0;
  for (std::size_t cut = 1; cut <= order.size(); ++cut) {
    std::size_t tp = 0;
    for (std::size_t k = 0; k < cut; ++k) tp += y[order[k]] == 1;
    const double r = static_cast<double>(tp) / static_cast<double>(n_pos);
    ap += (r - prev_r) * (static_cast<double>(tp) / static_cast<double>(cut));
    prev_r = r;
  }
  return ap;
}

Outcome metric_oracles() {
  Outcome o;
  Rng rng(4);
  std::size_t cases = 0;
  for (std::size_t n = 1; n <= 8; ++n)
    for (unsigned mask = 0; mask < (1u << n); ++mask) {
      std::vector<int> y(n);
      for (std::size_t i = 0; i < n; ++i) y[i] = (mask >> i) & 1u;
      const std::size_t pos = static_cast<std::size_t>(std::count(y.begin(), y.end(), 1));
      for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> s(n);
        for (double& v : s) v = trial % 2 ? uniform(rng, 0.0, 1.0) : static_cast<double>(uniform_index(rng, 5)) / 4.0;
        if (pos > 0) {
          const double ap = metrics::auprc(s, y);
          o.expect(ap == sweep_auprc(s, y), "auprc differs from sweep oracle");
          o.expect(metrics::delta_auprc(s, y) == ap - static_cast<double>(pos) / static_cast<double>(n),
                   "delta_auprc differs from AUPRC - N_pos/N");
        }
        if (pos > 0 && pos < n) o.expect(metrics::auroc(s, y) == pair_auroc(s, y), "auroc differs from pair oracle");
        ++cases;
      }
    }
  const std::vector<double> s{0.9, 0.8, 0.3};
  const std::vector<int> y{1, 0, 1};
  const double roc = metrics::auroc(s, y), ap = metrics::auprc(s, y), dap = metrics::delta_auprc(s, y);
  o.expect(roc == 0.5, "worked example AUROC " + std::to_string(roc));
  o.expect(std::abs(ap - 5.0 / 6.0) <= 1e-10, "worked example AUPRC " + std::to_string(ap));
  o.expect(std::abs(dap - 1.0 / 6.0) <= 1e-10, "worked example delta AUPRC " + std::to_string(dap));
  std::ostringstream d;
  d.precision(10);
  d << cases << " exhaustive cases; worked example AUROC " << roc << ", AUPRC " << ap << ", dAUPRC " << dap;
  o.detail = d.str();
  return o;
}

// --- 5 -------------------------------------------------------------------------------

struct E2eRun {
  double finetune = 0.0, zero_shot = 0.0, train_secs = 0.0, total_secs = 0.0, final_loss = 0.0;
};

E2eRun run_synthetic(const Registry& reg, std::size_t hidden) {
  const auto t0 = Clock::now();
  ModelConfig mc;
  mc.hidden = hidden;
  TrainConfig tc;
  const TrainResult res = meta_train(reg, mc, tc, std::nullopt, [&](const EpochLog& e) {
    if (e.epoch % 20 == 0)
      std::cerr << "  [d=" << hidden << "] epoch " << e.epoch << " loss " << e.mean_outer_loss << " ("
                << seconds_since(t0) << " s)\n";
  });
  E2eRun r;
  r.train_secs = seconds_since(t0);
  r.final_loss = res.log.empty() ? 0.0 : res.log.back().mean_outer_loss;
  EvalSettings es;
  es.support_size = 20;
  es.repeats = 10;
  r.finetune = overall(evaluate_split(res.params, reg, Split::kTest, mc, tc, es)).auroc;
  es.finetune = false;
  r.zero_shot = overall(evaluate_split(res.params, reg, Split::kTest, mc, tc, es)).auroc;
  r.total_secs = seconds_since(t0);
  return r;
}

Outcome synthetic_end_to_end() {
  Outcome o;
  const Registry reg = synth_generate(200, 20, 60, 0);
  E2eRun run = run_synthetic(reg, 300);
  std::ostringstream d;
  d.precision(4);
  d << "d=300: fine-tuned AUROC " << run.finetune << ", zero-shot " << run.zero_shot << ", final loss "
    << run.final_loss << ", " << run.total_secs / 60.0 << " min";
  if (run.total_secs > 30.0 * 60.0) {
    run = run_synthetic(reg, 64);
    d << "; over 30 min, reduced profile d=64: fine-tuned " << run.finetune << ", zero-shot " << run.zero_shot;
  }
  o.expect(run.finetune >= 0.85, "mean test AUROC below 0.85");
  o.expect(run.finetune > run.zero_shot, "fine-tuned AUROC does not exceed zero-shot");
  o.detail = d.str();
  return o;
}

// --- 6 -------------------------------------------------------------------------------

bool close_ulps(double a, double b) { return std::abs(a - b) <= 8.0 * 2.220446049250313e-16 * std::max(1.0, std::abs(b)); }

Outcome task_relation_algebra() {
  using namespace taskrel;
  Outcome o;
  Rng rng(6);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + uniform_index(rng, 8), len = 1 + uniform_index(rng, 50);
    std::vector<TaskVector> v;
    for (std::size_t i = 0; i < n; ++i) {
      TaskVector t{"t" + std::to_string(i), std::vector<double>(len), VectorMode::kAdaptedWDelta};
      for (double& x : t.p) x = uniform(rng, -2.0, 2.0);
      v.push_back(t);
    }
    for (Metric m : {Metric::kDot, Metric::kCosine, Metric::kEuclidean}) {
      const RelationMatrix r = relation_matrix(v, m);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) worst = std::max(worst, std::abs(r.at(i, j) - r.at(j, i)));
    }
    std::vector<double> mm(n * n);
    for (double& x : mm) x = uniform(rng, -3.0, 3.0);
    std::vector<FlatParams> same(n, v[0].p);
    o.expect(implicit_inner_update(same, mm) == same, "equal parameters are not a fixed point");
    std::vector<FlatParams> w;
    for (const TaskVector& t : v) w.push_back(t.p);
    const FlatParams theta(v[1].p);
    o.expect(implicit_outer_update(theta, w, mm, 0.0) == theta, "eta = 0 is not the identity");
  }
  o.expect(worst < 1e-9, "relation matrix asymmetry " + std::to_string(worst));

  const double a0 = 0.7, a1 = -1.3, m00 = 0.25, m01 = 0.4, m10 = -0.6, m11 = 1.5, eta = 0.3, base = 2.0;
  const std::vector<FlatParams> w2 = {{a0}, {a1}};
  const std::vector<double> m2 = {m00, m01, m10, m11};
  const auto inner = implicit_inner_update(w2, m2);
  o.expect(close_ulps(inner[0][0], a0 + m01 * (a1 - a0)) && close_ulps(inner[1][0], a1 + m10 * (a0 - a1)),
           "2-task inner update");
  const auto outer = implicit_outer_update(std::vector<double>{base}, w2, m2, eta);
  o.expect(close_ulps(outer[0], base + eta * (m01 * (a1 - a0) + m10 * (a0 - a1))), "2-task outer update");
  const auto inf = implicit_inference_update(std::vector<double>{base}, w2, m2);
  o.expect(close_ulps(inf[0][0], base + m01 * (a1 - a0)) && close_ulps(inf[1][0], base + m10 * (a0 - a1)),
           "2-task inference update");
  const std::vector<TaskVector> hv = {{"a", {3.0, 4.0}, VectorMode::kAdaptedWDelta}, {"b", {1.0, -2.0}, VectorMode::kAdaptedWDelta}};
  o.expect(close_ulps(relation_matrix(hv, Metric::kDot).at(0, 1), -5.0), "2-task dot kernel");
  o.expect(close_ulps(relation_matrix(hv, Metric::kCosine).at(0, 1), -5.0 / (5.0 * std::sqrt(5.0))), "2-task cosine kernel");
  o.expect(close_ulps(relation_matrix(hv, Metric::kEuclidean).at(0, 1), -(4.0 + 36.0)), "2-task euclidean kernel");

  std::ostringstream d;
  d << "100 random instances x 3 kernels, max asymmetry " << worst << "; fixed point, eta=0 and 2-task oracles checked";
  o.detail = d.str();
  return o;
}

// --- 7 -------------------------------------------------------------------------------

Outcome parser_corpus() {
  Outcome o;
  const std::string data = UNIMATCH_TEST_DATA;
  std::vector<std::string> valid;
  {
    std::ifstream in(data + "/smiles_corpus.txt");
    for (std::string line; std::getline(in, line);) {
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ls(line);
      std::string smi;
      std::size_t atoms = 0, bonds = 0;
      ls >> smi >> atoms >> bonds;
      valid.push_back(smi);
      try {
        const smiles::MolGraph g = smiles::mol_from_smiles(smi);
        smiles::check_invariants(g);
        o.expect(g.num_atoms() == atoms && g.num_bonds() == bonds, smi + " counts differ from fixture");
      } catch (const std::exception& e) {
        o.expect(false, smi + " failed: " + e.what());
      }
    }
  }
  o.expect(valid.size() == 50, "corpus holds " + std::to_string(valid.size()) + " molecules, expected 50");
  std::size_t malformed = 0;
  {
    std::ifstream in(data + "/malformed_smiles.txt");
    for (std::string line; std::getline(in, line);) {
      if (line.empty() || line[0] == '#') continue;
      const auto tab = line.find('\t');
      const std::string smi = line.substr(0, tab);
      const std::size_t offset = std::stoul(line.substr(tab + 1));
      ++malformed;
      try {
        smiles::parse(smi);
        o.expect(false, "'" + smi + "' was accepted");
      } catch (const ParseError& e) {
        o.expect(e.offset() == offset, "'" + smi + "' error at " + std::to_string(e.offset()) + ", expected " +
                                           std::to_string(offset));
      }
    }
  }
  o.expect(malformed > 0, "no malformed fixtures found");

  const std::string alphabet = "CNOSPFIBrcnos()[]=#-+:/\\@%.0123456789HlXx$ ";
  Rng rng(7);
  std::size_t crashes = 0, accepted = 0;
  for (int iter = 0; iter < 10000 && !valid.empty(); ++iter) {
    std::string s = valid[uniform_index(rng, valid.size())];
    const std::size_t edits = 1 + uniform_index(rng, 3);
    for (std::size_t k = 0; k < edits; ++k) {
      const std::size_t op = uniform_index(rng, 3), pos = uniform_index(rng, s.size() + 1);
      const char c = alphabet[uniform_index(rng, alphabet.size())];
      if (op == 0) s.insert(s.begin() + static_cast<std::ptrdiff_t>(pos), c);
      else if (pos < s.size()) (op == 1 ? s.erase(pos, 1) : s.replace(pos, 1, 1, c));
    }
    try {
      smiles::check_invariants(smiles::mol_from_smiles(s));
      ++accepted;
    } catch (const ParseError& e) {
      if (e.offset() > s.size()) ++crashes;
    } catch (...) {
      ++crashes;
    }
  }
  o.expect(crashes == 0, std::to_string(crashes) + " fuzz cases crashed");
  std::ostringstream d;
  d << valid.size() << " corpus molecules, " << malformed << " malformed strings located, 10000 fuzz cases ("
    << accepted << " still valid), " << crashes << " crashes";
  o.detail = d.str();
  return o;
}

// --- 8 -------------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

Outcome determinism() {
  Outcome o;
  const fs::path root = fs::temp_directory_path() / ("unimatch_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(root);
  std::ofstream(root / "run.cfg") << "[train]\ninner_steps = 3\nbatch_tasks = 6\nmax_epochs = 4\nworkers = 2\n"
                                     "[encoder]\nlayers = 3\nhidden = 24\n"
                                     "[protocol]\nsupport_size = 10\nquery_size = 32\neval_repeats = 3\n";
  write_registry(synth_generate(12, 4, 40, 0), root / "data");
  std::string ckpts[2], csvs[2];
  for (int run = 0; run < 2; ++run) {
    cli::TrainArgs t;
    t.config = (root / "run.cfg").string();
    t.data = (root / "data").string();
    t.out = (root / ("run" + std::to_string(run) + ".ckpt")).string();
    t.seed = 17;
    std::ostringstream out, err;
    const int code = cli::cmd_train(t, out, err);
    o.expect(code == 0, "cmd_train exit " + std::to_string(code) + ": " + err.str());
    ckpts[run] = slurp(t.out);
  }
  for (int run = 0; run < 2; ++run) {
    cli::EvalArgs e;
    e.ckpt = (root / "run0.ckpt").string();
    e.data = (root / "data").string();
    std::ostringstream out, err;
    const int code = cli::cmd_eval(e, out, err);
    o.expect(code == 0, "cmd_eval exit " + std::to_string(code) + ": " + err.str());
    csvs[run] = out.str();
  }
  fs::remove_all(root);
  o.expect(!ckpts[0].empty() && ckpts[0] == ckpts[1], "checkpoints differ between identical runs");
  o.expect(!csvs[0].empty() && csvs[0] == csvs[1], "evaluation CSVs differ between identical runs");
  o.detail = "checkpoints " + std::to_string(ckpts[0].size()) + " bytes identical; eval CSV " +
             std::to_string(csvs[0].size()) + " bytes identical";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unimatch acceptance suite"};
  std::vector<int> only;
  app.add_option("--only", only, "Run only these criteria (1-8)");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient fidelity", gradient_fidelity},   {"matching invariants", matching_invariants},
      {"inner-loop exactness", inner_loop_exactness}, {"metric oracles", metric_oracles},
      {"synthetic few-shot end-to-end", synthetic_end_to_end}, {"task-relation algebra", task_relation_algebra},
      {"parser corpus", parser_corpus},            {"determinism", determinism},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.ok = false;
      o.failures.push_back(std::string("exception: ") + e.what());
    }
    std::cout << "[" << (o.ok ? "PASS" : "FAIL") << "] criterion " << id << " " << criteria[i].first << ": " << o.detail;
    for (const std::string& f : o.failures) std::cout << "\n        " << f;
    std::cout << std::endl;
    failed += !o.ok;
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed == 0 ? 0 : 1;
}
