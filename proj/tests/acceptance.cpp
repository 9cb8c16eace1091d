// Acceptance checks: one PASS/FAIL line per criterion.
//   acceptance            run all criteria
//   acceptance --only N   run criterion N

#include "bcosnet/ablation.hpp"
#include "bcosnet/branches.hpp"
#include "bcosnet/pooling.hpp"
#include "bcosnet/regularization.hpp"
#include "support.hpp"

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace bcosnet;
using namespace testing_support;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, a);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------

Verdict gem_limits() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(1001);
  const std::vector<double> ps{1.0, 1.5, 2.0, 3.0, 4.0, 6.5, 10.0, 20.0, 50.0, 100.0, 1000.0};
  double worst_avg = 0, worst_max = 0;
  std::size_t monotone_violations = 0;
  for (int s = 0; s < 1000; ++s) {
    auto x = random_tensor(rng, 1, 4, 4, 2, 1e-6, 10.0);
    const auto avg = avg_pool(x, all_rows(4));
    const auto mx = max_pool(x, all_rows(4)).values;
    Matrix<double> prev;
    for (double p : ps) {
      const auto g = gem_pool(x, all_rows(4), p, 1e-6);
      if (p == 1.0) worst_avg = std::max(worst_avg, (g - avg).cwiseAbs().maxCoeff());
      if (p == 1000.0) worst_max = std::max(worst_max, (g - mx).cwiseAbs().maxCoeff());
      if (prev.size() > 0)
        for (Eigen::Index c = 0; c < g.cols(); ++c) monotone_violations += g(0, c) < prev(0, c) - 1e-12;
      prev = g;
    }
  }
  const double secs = seconds_since(t0);
  const bool pass = worst_avg < 1e-6 && worst_max < 1e-3 && monotone_violations == 0 && secs < 10;
  return {pass, "max|gem(1)-avg| " + fmt("%.2e", worst_avg) + " (<1e-6), max|gem(1000)-max| " +
                    fmt("%.2e", worst_max) + " (<1e-3; finite-p bound max*ln(8)/1000 = " +
                    fmt("%.2e", 10.0 * std::log(8.0) / 1000.0) + " on [eps,10]), monotone violations " +
                    std::to_string(monotone_violations) + ", " + fmt("%.2fs", secs)};
}

// ---------------------------------------------------------------------------

double branch_grad_error(Branch<double>& branch, Tensor4<double> x, Rng& rng) {
  Matrix<double> y = branch.forward(x, Mode::train);
  Matrix<double> w = random_matrix(rng, y.rows(), y.cols());
  ParameterList<double> params;
  branch.collect("b", params);
  for (auto& p : params) p.param->zero_grad();
  Tensor4<double> dx = branch.backward(w);
  auto loss = [&] { return dot(w, branch.forward(x, Mode::train)); };
  double worst = relative_error(to_vector(dx), numeric_gradient(loss, span_of(x)));
  for (auto& [path, p] : params)
    if (p->trainable) worst = std::max(worst, relative_error(p->grad, numeric_gradient(loss, std::span<double>(p->value))));
  return worst;
}

Verdict gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  std::map<std::string, double> worst;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(2000 + seed);
    {
      GemPool<double> pool(GemParams{rng.uniform(1.0, 8.0), true, 1e-6}, true);
      auto x = random_tensor(rng, 2, 3, 6, 2, 0.05, 2.0);
      const auto regions = StripePartition::make(6, 3).stripes;
      Matrix<double> w = random_matrix(rng, 2, 9);
      pool.forward(x, regions);
      pool.p().zero_grad();
      auto dx = pool.backward(w);
      auto loss = [&] { return dot(w, pool.forward(x, regions)); };
      worst["gem.x"] = std::max(worst["gem.x"], relative_error(to_vector(dx), numeric_gradient(loss, span_of(x))));
      const auto gp = pool.p().grad;
      worst["gem.p"] =
          std::max(worst["gem.p"], relative_error(gp, numeric_gradient(loss, std::span<double>(pool.p().value))));
    }
    {
      GcpBranch<double> gcp(5, 3, 6, rng);
      worst["gcp"] = std::max(worst["gcp"], branch_grad_error(gcp, random_tensor(rng, 4, 5, 6, 2, 0.0, 1.0), rng));
    }
    {
      OvrBranch<double> ovr(4, 3, {2, 3, 6}, rng);
      worst["ovr"] = std::max(worst["ovr"], branch_grad_error(ovr, random_tensor(rng, 4, 4, 6, 2, 0.0, 1.0), rng));
    }
    {
      ClassifierHead<double> head(6, 5, rng);
      Matrix<double> f = random_matrix(rng, 8, 6);
      std::vector<int> y;
      for (int i = 0; i < 8; ++i) y.push_back(static_cast<int>(rng.index(5)));
      ParameterList<double> params;
      head.collect("head", params);
      for (auto& p : params) p.param->zero_grad();
      const auto r = id_loss(f, y, head);
      std::vector<std::vector<double>> analytic;
      for (auto& p : params) analytic.push_back(p.param->grad);
      auto loss = [&] { return id_loss(f, y, head).value; };
      double e = relative_error(to_vector(r.grad), numeric_gradient(loss, span_of(f)));
      for (std::size_t i = 0; i < params.size(); ++i)
        e = std::max(e, relative_error(analytic[i], numeric_gradient(loss, std::span<double>(params[i].param->value))));
      worst["id"] = std::max(worst["id"], e);
    }
    {
      std::vector<int> y{0, 0, 0, 1, 1, 1, 2, 2, 2};
      Matrix<double> x = random_matrix(rng, 9, 5);
      const TripletConfig cfg{TripletMode::softplus, 0.3};
      const auto r = triplet_loss_batch_hard(x, y, cfg);
      auto loss = [&] { return triplet_loss_batch_hard(x, y, cfg).value; };
      worst["triplet"] =
          std::max(worst["triplet"], relative_error(to_vector(r.grad), numeric_gradient(loss, span_of(x))));
    }
    {
      CenterState<double> state(4, 5);
      state.centers = random_matrix(rng, 4, 5);
      Matrix<double> x = random_matrix(rng, 8, 5);
      std::vector<int> y{0, 0, 1, 1, 2, 2, 3, 3};
      const auto r = center_loss(x, y, state);
      auto loss = [&] { return center_loss(x, y, state).value; };
      worst["center"] =
          std::max(worst["center"], relative_error(to_vector(r.grad), numeric_gradient(loss, span_of(x))));
    }
  }
  const double secs = seconds_since(t0);
  bool pass = secs < 120;
  std::string detail;
  for (const auto& [name, e] : worst) {
    pass = pass && e < 1e-4;
    detail += name + " " + fmt("%.1e", e) + ", ";
  }
  return {pass, "max relative error over 20 seeds: " + detail + fmt("%.2fs", secs)};
}

// ---------------------------------------------------------------------------

Verdict mining_oracle() {
  Rng rng(3001);
  std::vector<int> y;
  for (int p = 0; p < 4; ++p)
    for (int k = 0; k < 4; ++k) y.push_back(p);
  double worst = 0;
  std::size_t index_mismatches = 0;
  for (int b = 0; b < 50; ++b) {
    Matrix<double> x = random_matrix(rng, 16, 8);
    if (b % 5 == 0) x.row(2) = x.row(0);  // exact ties
    for (auto mode : {TripletMode::softplus, TripletMode::hinge_margin}) {
      const TripletConfig cfg{mode, 0.3};
      const auto r = triplet_loss_batch_hard(x, y, cfg);
      const auto o = brute_force_triplet(x, y, cfg);
      worst = std::max(worst, std::isnan(o.loss) ? 1.0 : std::abs(r.value - o.loss));
      index_mismatches += r.hardest_positive != o.pos || r.hardest_negative != o.neg;
    }
  }
  return {worst < 1e-10 && index_mismatches == 0, "50 batches (P=4, K=4), both modes: max |loss diff| " +
                                                      fmt("%.1e", worst) + ", index mismatches " +
                                                      std::to_string(index_mismatches)};
}

// ---------------------------------------------------------------------------

Verdict metric_oracle() {
  Rng rng(4001);
  std::size_t mismatches = 0, junk = 0, dups = 0, ties = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t nq = 1 + rng.index(6), ng = 2 + rng.index(20), ids = 1 + rng.index(5);
    std::vector<int> qids, qcams, gids, gcams;
    auto pick = [&] { return rng.bernoulli(0.1) ? kJunkId : static_cast<int>(1 + rng.index(ids)); };
    for (std::size_t q = 0; q < nq; ++q) {
      qids.push_back(pick());
      qcams.push_back(static_cast<int>(rng.index(3)));
    }
    for (std::size_t g = 0; g < ng; ++g) {
      if (rng.bernoulli(0.2)) {
        const std::size_t q = rng.index(nq);
        gids.push_back(qids[q]);
        gcams.push_back(qcams[q]);
        ++dups;
      } else {
        gids.push_back(pick());
        gcams.push_back(static_cast<int>(rng.index(3)));
      }
      junk += gids.back() == kJunkId;
    }
    Matrix<double> d(static_cast<Eigen::Index>(nq), static_cast<Eigen::Index>(ng));
    for (Eigen::Index i = 0; i < d.size(); ++i) d.data()[i] = static_cast<double>(rng.index(4));
    ties += static_cast<std::size_t>(d.size()) > 4;
    const auto r = evaluate(qids, qcams, gids, gcams, d, 20);
    const auto o = brute_force_metrics(qids, qcams, gids, gcams, d, 20);
    mismatches += r.mAP != o.mAP || r.cmc != o.cmc || r.per_query_ap != o.ap || r.valid != o.valid;
  }
  return {mismatches == 0, "100 instances (" + std::to_string(junk) + " junk, " + std::to_string(dups) +
                               " same-camera duplicates, " + std::to_string(ties) +
                               " with tied distances): exact mismatches " + std::to_string(mismatches)};
}

// ---------------------------------------------------------------------------

Verdict identities() {
  Rng rng(5001);
  double worst_gcp = 0, worst_ovr = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng.index(5), h = 6 + rng.index(10);
    auto x = random_tensor(rng, 2, 4, h, 3, 0.0, 5.0);
    const auto f = contrastive_features(x, n);
    const Matrix<double> lhs = static_cast<double>(n - 1) * f.f_cont + f.f_max;
    worst_gcp = std::max(worst_gcp, (lhs - f.f_avg).cwiseAbs().maxCoeff());

    const std::size_t parts = 2 + rng.index(5);
    std::vector<Matrix<double>> fs;
    for (std::size_t i = 0; i < parts; ++i) fs.push_back(random_matrix(rng, 3, 4, -5, 5));
    Matrix<double> mean = Matrix<double>::Zero(3, 4);
    for (const auto& m : fs) mean += m;
    mean /= static_cast<double>(parts);
    const auto rest = one_vs_rest(fs);
    for (std::size_t i = 0; i < parts; ++i) {
      const Matrix<double> rhs = fs[i] + static_cast<double>(parts - 1) * rest[i];
      worst_ovr = std::max(worst_ovr, (static_cast<double>(parts) * mean - rhs).cwiseAbs().maxCoeff());
    }
  }
  return {worst_gcp < 1e-5 && worst_ovr < 1e-5, "100 random maps: max |(n-1)f_cont + f_max - f_avg| " +
                                                    fmt("%.1e", worst_gcp) + ", max |h*mean - f_i - (h-1)r_i| " +
                                                    fmt("%.1e", worst_ovr)};
}

// ---------------------------------------------------------------------------

Verdict dimension_contract() {
  ModelConfig cfg;
  bool pass = cfg.branch_dim(BranchId::local) == 2048 && cfg.branch_dim(BranchId::global) == 512 &&
              cfg.branch_dim(BranchId::gcp) == 256 && cfg.branch_dim(BranchId::ovr) == 1536 &&
              cfg.concat_dim() == 4352;
  std::string detail = "default (" + std::to_string(cfg.branch_dim(BranchId::local)) + ", " +
                       std::to_string(cfg.branch_dim(BranchId::global)) + ", " +
                       std::to_string(cfg.branch_dim(BranchId::gcp)) + ", " +
                       std::to_string(cfg.branch_dim(BranchId::ovr)) + ") -> " + std::to_string(cfg.concat_dim());
  const std::vector<std::pair<std::string, std::size_t>> expected{
      {"local,global", 2560}, {"local,global,ovr", 4096}, {"local,global,gcp", 2816}, {"local,global,gcp,ovr", 4352}};
  for (const auto& [branches, dim] : expected) {
    RunConfig rc;
    rc.set("branches", branches);
    const auto m = rc.model(751);
    pass = pass && m.concat_dim() == dim;
    detail += "; " + branches + " " + std::to_string(m.concat_dim());
  }
  // A built model's retrieval feature has the configured width.
  Rng rng(6001);
  ModelConfig small;
  small.trunk = {TrunkVariant::osnet_like, 32, false, 16};
  small.bottleneck_dim = 16;
  small.num_identities = 3;
  BcOsnet<float> model(small, rng);
  Tensor4<float> img(1, 3, 128, 64);
  const auto f = model.extract(img);
  pass = pass && static_cast<std::size_t>(f.cols()) == small.concat_dim();
  detail += "; built model width " + std::to_string(f.cols()) + " = " + std::to_string(small.concat_dim());
  return {pass, detail};
}

// ---------------------------------------------------------------------------

Verdict overfit() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto cfg = tiny_run_config();
  // Untrained reference: same initialization, no optimization.
  const Dataset ds = load_dataset(cfg);
  Rng init(Rng::derive(cfg.seed(), 0));
  BcOsnet<float> untrained(cfg.model(ds.num_train_ids), init);
  const ImageLoader loader(64, 32);
  const auto baseline = evaluate_model(untrained, ds, loader, cfg.eval());

  const auto dir = scratch_dir("acceptance_overfit");
  const auto out = run_training(cfg, dir);
  const auto& h = out.fit.history;
  const double first = h.front().total, last = h.back().total;
  const double secs = seconds_since(t0);
  const bool pass = h.size() <= 200 && last <= 0.5 * first && out.metrics.rank1 >= 0.9 && secs < 300;
  return {pass, std::to_string(h.size()) + " steps: loss " + fmt("%.3f", first) + " -> " + fmt("%.3f", last) +
                    " (ratio " + fmt("%.3f", last / first) + ", need <= 0.5), rank-1 " +
                    fmt("%.3f", out.metrics.rank1) + " (need >= 0.9; chance 0.125, untrained " +
                    fmt("%.3f", baseline.rank1) + "), mAP " + fmt("%.3f", out.metrics.mAP) + ", " +
                    fmt("%.1fs", secs)};
}

// ---------------------------------------------------------------------------

Verdict ablation_harness() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto dir = scratch_dir("acceptance_ablation");
  std::string sets;
  auto cfg = tiny_run_config();
  cfg.apply_overrides({"optim.epochs=20", "optim.warmup_epochs=2", "optim.first_milestone=15",
                       "optim.second_milestone=18"});
  const RunConfig defaults;
  for (const auto& [k, v] : cfg.values())
    if (v != defaults.get(k)) sets += " --set " + k + "=" + v;
  const std::string cmd = std::string(BCOSNET_CLI_PATH) + " ablate --table 2 --table 3 --table 4 --table 5 -o " +
                          dir.string() + sets + " > " + (dir / "ablate.out").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  const int rc = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  bool pass = rc == 0;
  std::string detail = "exit " + std::to_string(rc);
  for (int t = 2; t <= 5; ++t) {
    const auto grid = ablation_preset(t);
    std::ifstream md(dir / ("table" + std::to_string(t)) / "ablation.md");
    const std::string text{std::istreambuf_iterator<char>(md), std::istreambuf_iterator<char>()};
    std::size_t ok_rows = 0;
    for (const auto& row : grid.rows) {
      const auto pos = text.find("| " + row.label + " |");
      if (pos == std::string::npos) continue;
      const auto eol = text.find('\n', pos);
      ok_rows += text.substr(pos, eol - pos).find("| ok |") != std::string::npos;
    }
    pass = pass && ok_rows == grid.rows.size();
    detail += "; table " + std::to_string(t) + " " + std::to_string(ok_rows) + "/" + std::to_string(grid.rows.size()) +
              " rows complete";
  }
  return {pass, detail + ", " + fmt("%.1fs", seconds_since(t0))};
}

// ---------------------------------------------------------------------------

Verdict schedule() {
  const OptimConfig o;
  bool pass = lr_at(60, o) == 3.5e-4;
  std::size_t bad = 0;
  for (std::size_t e = 61; e <= 130; ++e) bad += lr_at(e, o) != 3.5e-5;
  for (std::size_t e = 131; e <= 160; ++e) bad += lr_at(e, o) != 3e-6;
  pass = pass && bad == 0;
  return {pass, "lr(60) " + fmt("%.1e", lr_at(60, o)) + ", lr(61..130) " + fmt("%.1e", lr_at(61, o)) +
                    ", lr(131..160) " + fmt("%.0e", lr_at(131, o)) + ", inexact epochs " + std::to_string(bad)};
}

// ---------------------------------------------------------------------------

Verdict regularizers() {
  Rng rng(10001);
  auto x = random_tensor(rng, 16, 8, 16, 8, 0.5, 1.5);
  BatchDropBlock<double> bdb({0.3, 1.0});
  std::size_t mask_mismatch = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto y = bdb.forward(x, rng, Mode::train);
    for (std::size_t n = 0; n < y.batch(); ++n)
      for (std::size_t c = 0; c < y.channels(); ++c)
        for (std::size_t i = 0; i < y.height(); ++i)
          for (std::size_t j = 0; j < y.width(); ++j)
            mask_mismatch += (y.at(n, c, i, j) == 0.0) != (y.at(0, 0, i, j) == 0.0);
  }
  const auto e = bdb.forward(x, rng, Mode::eval);
  const bool identity = to_vector(e) == to_vector(x);

  const double sigma = 0.5;
  const Eigen::Index side = 1000;
  Matrix<double> ones = Matrix<double>::Ones(side, side);
  Rng noise(10002);
  const auto g = gaussian_continuous_dropout(ones, {sigma}, noise, true);
  const double N = static_cast<double>(side * side);
  const double ratio = g.sum() / ones.sum();
  const double tol = 3 * sigma / std::sqrt(N);
  const bool gcd_identity = to_vector(gaussian_continuous_dropout(ones, {sigma}, noise, false)) == to_vector(ones);
  const bool pass = mask_mismatch == 0 && identity && std::abs(ratio - 1) <= tol && gcd_identity;
  return {pass, "BDB mask mismatches across batch " + std::to_string(mask_mismatch) + ", eval identity " +
                    (identity ? "yes" : "no") + "; GCDropout mean ratio " + fmt("%.6f", ratio) + " (1 +/- " +
                    fmt("%.1e", tol) + ", N = 1e6), eval identity " + (gcd_identity ? "yes" : "no")};
}

struct Criterion {
  const char* name;
  Verdict (*run)();
};

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> all{
      {"GeM limits", gem_limits},
      {"gradient suite", gradient_suite},
      {"mining oracle", mining_oracle},
      {"metric oracle", metric_oracle},
      {"algebraic identities", identities},
      {"dimension contract", dimension_contract},
      {"end-to-end overfit", overfit},
      {"ablation harness", ablation_harness},
      {"schedule", schedule},
      {"regularizer contracts", regularizers},
  };
  return all;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::size_t> which;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      which.push_back(std::stoul(argv[++i]));
    } else {
      std::cerr << "usage: acceptance [--only N]...\n";
      return 2;
    }
  }
  if (which.empty())
    for (std::size_t i = 1; i <= criteria().size(); ++i) which.push_back(i);

  int failed = 0;
  for (auto n : which) {
    if (n < 1 || n > criteria().size()) {
      std::cerr << "no criterion " << n << "\n";
      return 2;
    }
    const auto& c = criteria()[n - 1];
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (v.pass ? "PASS" : "FAIL") << "  " << n << ". " << c.name << ": " << v.detail << std::endl;
    failed += !v.pass;
  }
  return failed == 0 ? 0 : 1;
}
