#include "collab/verify.hpp"

#include <algorithm>
#include <functional>
#include <optional>

#include "collab/ops.hpp"

namespace collab {

ArchSpec toy_arch(const ToySpec& spec) {
  if (spec.depth < 1) fail(ErrorKind::config, "toy problem needs at least one conv block");
  ArchSpec arch;
  arch.in_channels = 1;
  arch.in_height = spec.height;
  arch.in_width = spec.width;
  std::size_t h = spec.height, w = spec.width;
  for (std::size_t i = 0; i < spec.depth; ++i) {
    if (i > 0 && h >= 4 && w >= 4) {
      arch.trunk.push_back(LayerSpec::pool(2));
      h /= 2;
      w /= 2;
    }
    arch.trunk.push_back(LayerSpec::conv(spec.channels, static_cast<int>(i + 1)));
  }
  arch.head = {LayerSpec::flat(), LayerSpec::drop(0.5), LayerSpec::dense(spec.hidden),
               LayerSpec::drop(0.5), LayerSpec::dense(spec.classes)};
  return arch;
}

ToyProblem make_toy_problem(const ToySpec& spec, const LossConfig& cfg) {
  const ArchSpec arch = toy_arch(spec);
  ToyProblem p{build_network<double>(arch, spec.classes, spec.seed), {}, {}, {}, cfg};
  cfg.validate(p.net.depth(), p.net.dropout_count());

  Rng rng = Rng(spec.seed).derive("toy.x");
  std::vector<double> x(spec.batch * spec.height * spec.width);
  for (double& v : x) v = rng.uniform();
  p.x = Tensor<double>::constant({spec.batch, 1, spec.height, spec.width}, std::move(x));
  for (std::size_t i = 0; i < spec.batch; ++i) p.labels.push_back(static_cast<int>(i % spec.classes));
  const std::size_t K = cfg.out ? cfg.K : 1;
  p.masks = p.net.sample_masks(spec.batch, K, Rng(spec.seed).derive("toy.masks"));
  return p;
}

std::string ScopedCheck::label() const {
  return layer == 0 ? loss : loss + "[" + std::to_string(layer) + "]";
}

bool ScopedCheck::passed(double tolerance) const {
  return grad.max_rel_error <= tolerance && structural_leaks.empty() && numeric_leaks.empty();
}

namespace {

using Fn = std::function<Tensor<double>()>;

bool all_zero(std::span<const double> g) {
  return std::all_of(g.begin(), g.end(), [](double v) { return v == 0.0; });
}

ScopedCheck run_check(ToyProblem& p, std::string loss, std::size_t layer,
                      const std::function<bool(const ParamRef<double>&)>& in_scope,
                      const Fn& f_grad, const Fn& f_value, double h) {
  ScopedCheck out;
  out.loss = std::move(loss);
  out.layer = layer;

  std::vector<ParamRef<double>> refs = p.net.parameters();
  std::vector<Tensor<double>> scoped;
  for (auto& r : refs) {
    r.tensor.zero_grad();
    if (in_scope(r)) scoped.push_back(r.tensor);
  }
  out.in_scope_tensors = scoped.size();

  // Locality audit: what the tape can reach, then what actually got a gradient.
  {
    const Tensor<double> l = f_grad();
    const Tape<double> tape = Tape<double>::record(l);
    for (const auto& r : refs) {
      if (!in_scope(r) && tape.contains(r.tensor)) out.structural_leaks.push_back(r.name);
    }
    backward(l);
    for (auto& r : refs) {
      if (!in_scope(r) && r.tensor.has_grad() && !all_zero(r.tensor.grad())) {
        out.numeric_leaks.push_back(r.name);
      }
      r.tensor.zero_grad();
    }
  }

  out.grad = finite_diff_check<double>(f_grad, f_value, scoped, h);
  for (auto& r : refs) r.tensor.zero_grad();
  return out;
}

Tensor<double> labels_one_hot(const ToyProblem& p) {
  return one_hot<double>(p.labels, p.net.classes());
}

}  // namespace

ScopedCheck check_out(ToyProblem& p, double h) {
  const Tensor<double> y = labels_one_hot(p);
  const LossConfig& cfg = p.cfg;
  auto branches = [&p]() {
    TrunkOutput<double> t = p.net.forward_trunk(p.x, Mode::train, false);
    return p.net.forward_branches(t.output, p.cfg.out ? p.cfg.K : 1, p.masks);
  };

  std::vector<Tensor<double>> frozen;
  {
    NoGradGuard ng;
    const BranchSet<double> b = branches();
    for (std::size_t i = 0; i < b.logits.size(); ++i) frozen.push_back(peer_target(b.logits, i, cfg.T));
  }
  const Fn f_grad = [&]() { return l_out(y, branches(), cfg); };
  const Fn f_value = [&]() {
    const BranchSet<double> b = branches();
    Tensor<double> acc;
    for (std::size_t i = 0; i < b.logits.size(); ++i) {
      const Tensor<double> term = add(scale(j_hard(y, b.logits[i], 1.0), cfg.alpha_out),
                                      scale(j_soft(frozen[i], b.logits[i], cfg.T), 1.0 - cfg.alpha_out));
      acc = acc.defined() ? add(acc, term) : term;
    }
    return scale(acc, 1.0 / static_cast<double>(b.logits.size()));
  };
  const auto scope = [](const ParamRef<double>& r) {
    return r.scope == ParamScope::trunk_block || r.scope == ParamScope::head;
  };
  return run_check(p, "out", 0, scope, f_grad, f_value, h);
}

namespace {

ScopedCheck check_mid(ToyProblem& p, std::size_t i, double h) {
  const Tensor<double> y = labels_one_hot(p);
  const LossConfig& cfg = p.cfg;
  Network<double>& net = p.net;
  const std::size_t N = net.depth();

  TrunkOutput<double> base;
  std::optional<Tensor<double>> frozen;
  {
    NoGradGuard ng;
    base = net.forward_trunk(p.x, Mode::train, false);
    std::vector<Tensor<double>> z;
    for (std::size_t j = 1; j <= N; ++j) z.push_back(net.forward_local_head(j, net.local_view(j, base, Mode::train)));
    frozen = mid_target(z, i, cfg.T, cfg.mid_target_includes_self);
  }
  const Fn f_grad = [&]() {
    TrunkOutput<double> t = net.forward_trunk(p.x, Mode::train, false);
    std::vector<Tensor<double>> z;
    for (std::size_t j = 1; j <= N; ++j) z.push_back(net.forward_local_head(j, net.local_view(j, t, Mode::train)));
    return l_mid_layer(y, z, i, cfg);
  };
  // Block i's input does not depend on block i or local head i, so the
  // cached trunk stays valid under every in-scope perturbation.
  const Fn f_value = [&]() {
    const Tensor<double> z = net.forward_local_head(i, net.local_view(i, base, Mode::train));
    Tensor<double> loss = scale(j_hard(y, z, cfg.T), cfg.alpha_mid);
    if (frozen) loss = add(loss, scale(j_soft(*frozen, z, cfg.T), cfg.beta_mid));
    return loss;
  };
  const auto scope = [i](const ParamRef<double>& r) {
    return r.layer == i && (r.scope == ParamScope::trunk_block || r.scope == ParamScope::local_head);
  };
  return run_check(p, "mid", i, scope, f_grad, f_value, h);
}

ScopedCheck check_pull_push(ToyProblem& p, std::size_t i, double h) {
  const Tensor<double> y = labels_one_hot(p);
  Network<double>& net = p.net;
  TrunkOutput<double> base;
  {
    NoGradGuard ng;
    base = net.forward_trunk(p.x, Mode::train, false);
  }
  const Fn f_grad = [&]() {
    TrunkOutput<double> t = net.forward_trunk(p.x, Mode::train, false);
    return l_pull_push_layer(p.x, y, net.local_view(i, t, Mode::train), i, net, p.cfg);
  };
  const Fn f_value = [&]() {
    return l_pull_push_layer(p.x, y, net.local_view(i, base, Mode::train), i, net, p.cfg);
  };
  const auto scope = [i](const ParamRef<double>& r) {
    return r.layer == i && (r.scope == ParamScope::trunk_block || r.scope == ParamScope::projection);
  };
  return run_check(p, "pull_push", i, scope, f_grad, f_value, h);
}

ScopedCheck check_kernel(ToyProblem& p, double h) {
  const std::vector<int> groups = p.cfg.resolved_kernel_groups(p.net.arch());
  std::vector<std::string> selected;
  for (std::size_t i = 1; i <= p.net.depth(); ++i) {
    if (std::find(groups.begin(), groups.end(), p.net.block(i).group_id) != groups.end()) {
      selected.push_back("block" + std::to_string(i) + ".kernel");
    }
  }
  const Fn f = [&]() { return l_kernel(p.net, p.cfg); };
  const auto scope = [&selected](const ParamRef<double>& r) {
    return std::find(selected.begin(), selected.end(), r.name) != selected.end();
  };
  return run_check(p, "kernel", 0, scope, f, f, h);
}

}  // namespace

std::vector<ScopedCheck> check_losses(ToyProblem& p, double h) {
  std::vector<ScopedCheck> out;
  if (p.cfg.out) out.push_back(check_out(p, h));
  if (p.cfg.mid) {
    for (std::size_t i = 1; i <= p.net.depth(); ++i) out.push_back(check_mid(p, i, h));
  }
  if (p.cfg.pull_push) {
    for (std::size_t i = 1; i <= p.net.depth(); ++i) out.push_back(check_pull_push(p, i, h));
  }
  if (p.cfg.kernel) out.push_back(check_kernel(p, h));
  return out;
}

}  // namespace collab
