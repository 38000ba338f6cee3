#include "config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace collab::cli {

using nlohmann::json;

namespace {

[[noreturn]] void bad(const std::string& path, const std::string& what) {
  fail(ErrorKind::config, path + ": " + what);
}

/// Typed access to one JSON object that remembers which keys were read, so
/// leftovers can be reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) bad(path_, "expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string key_path(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  double number(const std::string& key, double def) {
    if (!has(key)) return def;
    const json& v = raw(key);
    if (!v.is_number()) bad(key_path(key), "expected a number");
    return v.get<double>();
  }

  std::uint64_t count(const std::string& key, std::uint64_t def) {
    if (!has(key)) return def;
    return as_count(raw(key), key_path(key));
  }

  bool flag(const std::string& key, bool def) {
    if (!has(key)) return def;
    const json& v = raw(key);
    if (!v.is_boolean()) bad(key_path(key), "expected true or false");
    return v.get<bool>();
  }

  std::string text(const std::string& key, const std::string& def) {
    if (!has(key)) return def;
    const json& v = raw(key);
    if (!v.is_string()) bad(key_path(key), "expected a string");
    return v.get<std::string>();
  }

  const json* array(const std::string& key) {
    if (!has(key)) return nullptr;
    const json& v = raw(key);
    if (!v.is_array()) bad(key_path(key), "expected an array");
    return &v;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) bad(key_path(key), "unknown key");
    }
  }

  static std::uint64_t as_count(const json& v, const std::string& where) {
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer()) {
      if (v.get<std::int64_t>() < 0) bad(where, "must be nonnegative");
      return v.get<std::uint64_t>();
    }
    bad(where, "expected a nonnegative integer");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

LayerSpec parse_layer(const json& j, const std::string& path) {
  Section s(j, path);
  const std::string type = s.text("type", "");
  LayerSpec l;
  if (type == "conv") {
    l = LayerSpec::conv(s.count("channels", 0), static_cast<int>(s.count("group", 0)),
                        s.count("kernel", 3));
    if (l.channels == 0) bad(s.key_path("channels"), "must be >= 1");
  } else if (type == "pool") {
    l = LayerSpec::pool(s.count("window", 2));
  } else if (type == "flatten") {
    l = LayerSpec::flat();
  } else if (type == "dropout") {
    l = LayerSpec::drop(s.number("rate", 0.5));
    if (!(l.rate >= 0.0 && l.rate < 1.0)) bad(s.key_path("rate"), "must be in [0, 1)");
  } else if (type == "linear") {
    l = LayerSpec::dense(s.count("units", 0));
    if (l.units == 0) bad(s.key_path("units"), "must be >= 1");
  } else {
    bad(s.key_path("type"), "expected conv, pool, flatten, dropout or linear, got \"" + type + "\"");
  }
  s.finish();
  return l;
}

ArchSpec parse_arch(const json& j) {
  Section s(j, "arch");
  ArchSpec a;
  if (s.has("input")) {
    Section in(s.raw("input"), "arch.input");
    a.in_channels = in.count("channels", 1);
    a.in_height = in.count("height", 16);
    a.in_width = in.count("width", 16);
    in.finish();
  }
  for (const char* part : {"trunk", "head"}) {
    const json* list = s.array(part);
    if (!list) bad(s.key_path(part), "required");
    auto& dst = std::string(part) == "trunk" ? a.trunk : a.head;
    for (std::size_t i = 0; i < list->size(); ++i) {
      dst.push_back(parse_layer((*list)[i], "arch." + std::string(part) + "[" + std::to_string(i) + "]"));
    }
  }
  s.finish();
  return a;
}

TrainConfig parse_train(const json& j) {
  Section s(j, "train");
  TrainConfig t;
  t.epochs = s.count("epochs", t.epochs);
  t.batch_size = s.count("batch_size", t.batch_size);
  t.lr0 = s.number("lr0", t.lr0);
  if (const json* ms = s.array("milestones")) {
    for (std::size_t i = 0; i < ms->size(); ++i) {
      t.milestones.push_back(Section::as_count((*ms)[i], "train.milestones[" + std::to_string(i) + "]"));
    }
  }
  t.decay = s.number("decay", t.decay);
  t.momentum = s.number("momentum", t.momentum);
  t.weight_decay = s.number("weight_decay", t.weight_decay);
  t.seed = s.count("seed", t.seed);
  t.precision = static_cast<int>(s.count("precision", static_cast<std::uint64_t>(t.precision)));
  s.finish();
  return t;
}

std::vector<std::string> parse_names(const json& list, const std::string& path) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < list.size(); ++i) {
    if (!list[i].is_string()) bad(path + "[" + std::to_string(i) + "]", "expected a string");
    names.push_back(list[i].get<std::string>());
  }
  return names;
}

LossConfig parse_loss(const json& j) {
  Section s(j, "loss");
  LossConfig l;
  if (const json* act = s.array("active")) {
    try {
      set_active(l, parse_names(*act, "loss.active"));
    } catch (const Error& e) {
      bad("loss.active", e.what());
    }
  }
  l.K = s.count("K", l.K);
  l.T = s.number("T", l.T);
  l.alpha_out = s.number("alpha_out", l.alpha_out);
  l.alpha_mid = s.number("alpha_mid", l.alpha_mid);
  l.beta_mid = s.number("beta_mid", l.beta_mid);
  l.w_pp = s.number("w_pp", l.w_pp);
  if (const json* sched = s.array("pull_push_schedule")) {
    for (std::size_t i = 0; i < sched->size(); ++i) {
      const json& e = (*sched)[i];
      const std::string where = "loss.pull_push_schedule[" + std::to_string(i) + "]";
      if (!e.is_array() || e.size() != 2 || !e[0].is_number() || !e[1].is_number()) {
        bad(where, "expected [alpha_pull, alpha_push]");
      }
      l.pull_push_schedule.emplace_back(e[0].get<double>(), e[1].get<double>());
    }
  }
  l.lambda_kernel = s.number("lambda_kernel", l.lambda_kernel);
  if (const json* groups = s.array("kernel_groups")) {
    for (std::size_t i = 0; i < groups->size(); ++i) {
      if (!(*groups)[i].is_number_integer()) {
        bad("loss.kernel_groups[" + std::to_string(i) + "]", "expected an integer");
      }
      l.kernel_groups.push_back((*groups)[i].get<int>());
    }
  }
  l.mid_target_includes_self = s.flag("mid_target_includes_self", l.mid_target_includes_self);
  s.finish();
  return l;
}

NoiseConfig parse_noise(const json& j) {
  Section s(j, "noise");
  NoiseConfig n;
  n.level = s.number("level", n.level);
  n.reshuffle_per_epoch = s.flag("reshuffle_per_epoch", n.reshuffle_per_epoch);
  s.finish();
  return n;
}

DataSource parse_data(const json& j) {
  Section s(j, "data");
  DataSource d;
  if (s.has("synthetic")) {
    if (s.has("train_file") || s.has("test_file")) {
      bad("data", "give either synthetic or train_file/test_file, not both");
    }
    Section g(s.raw("synthetic"), "data.synthetic");
    SyntheticSpec& p = d.spec;
    p.classes = g.count("classes", p.classes);
    p.train_per_class = g.count("train_per_class", p.train_per_class);
    p.test_per_class = g.count("test_per_class", p.test_per_class);
    p.channels = g.count("channels", p.channels);
    p.height = g.count("height", p.height);
    p.width = g.count("width", p.width);
    p.signal = g.number("signal", p.signal);
    p.noise_sigma = g.number("noise_sigma", p.noise_sigma);
    p.seed = g.count("seed", p.seed);
    g.finish();
  } else if (s.has("train_file") || s.has("test_file")) {
    d.synthetic = false;
    d.train_file = s.text("train_file", "");
    d.test_file = s.text("test_file", "");
    if (d.train_file.empty() || d.test_file.empty()) {
      bad("data", "train_file and test_file must both be given");
    }
  }
  s.finish();
  return d;
}

SweepConfig parse_sweep(const json& j) {
  Section s(j, "sweep");
  SweepConfig w;
  if (const json* levels = s.array("levels")) {
    for (std::size_t i = 0; i < levels->size(); ++i) {
      if (!(*levels)[i].is_number()) bad("sweep.levels[" + std::to_string(i) + "]", "expected a number");
      w.levels.push_back((*levels)[i].get<double>());
    }
  }
  if (const json* seeds = s.array("seeds")) {
    for (std::size_t i = 0; i < seeds->size(); ++i) {
      w.seeds.push_back(Section::as_count((*seeds)[i], "sweep.seeds[" + std::to_string(i) + "]"));
    }
  }
  if (s.has("variants")) {
    const json& v = s.raw("variants");
    if (!v.is_object()) bad("sweep.variants", "expected an object of name -> active loss list");
    for (const auto& [name, list] : v.items()) {
      const std::string where = "sweep.variants." + name;
      if (!list.is_array()) bad(where, "expected an array of loss names");
      std::vector<std::string> names = parse_names(list, where);
      LossConfig probe;
      try {
        set_active(probe, names);
      } catch (const Error& e) {
        bad(where, e.what());
      }
      w.variants.emplace_back(name, std::move(names));
    }
  }
  s.finish();
  return w;
}

}  // namespace

std::vector<std::string> active_names(const LossConfig& loss) {
  std::vector<std::string> names;
  if (loss.out) names.push_back("out");
  if (loss.mid) names.push_back("mid");
  if (loss.pull_push) names.push_back("pull_push");
  if (loss.kernel) names.push_back("kernel");
  return names;
}

void set_active(LossConfig& loss, const std::vector<std::string>& names) {
  loss.out = loss.mid = loss.pull_push = loss.kernel = false;
  for (const std::string& n : names) {
    if (n == "out") {
      loss.out = true;
    } else if (n == "mid") {
      loss.mid = true;
    } else if (n == "pull_push") {
      loss.pull_push = true;
    } else if (n == "kernel") {
      loss.kernel = true;
    } else if (n != "baseline") {
      fail(ErrorKind::config, "unknown loss \"" + n + "\" (expected out, mid, pull_push, kernel)");
    }
  }
}

ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    // The parser reports "at line L, column C".
    fail(ErrorKind::config, std::string("config syntax error: ") + e.what());
  }
  Section top(j, "");
  ExperimentConfig cfg;
  if (top.has("arch")) cfg.arch = parse_arch(top.raw("arch"));
  if (top.has("train")) cfg.train = parse_train(top.raw("train"));
  if (top.has("loss")) cfg.loss = parse_loss(top.raw("loss"));
  if (top.has("noise")) cfg.noise = parse_noise(top.raw("noise"));
  if (top.has("data")) cfg.data = parse_data(top.raw("data"));
  if (top.has("output")) {
    Section o(top.raw("output"), "output");
    cfg.out_dir = o.text("dir", cfg.out_dir.string());
    o.finish();
  }
  if (top.has("sweep")) cfg.sweep = parse_sweep(top.raw("sweep"));
  top.finish();

  cfg.train.validate();
  cfg.noise.validate();
  for (double level : cfg.sweep.levels) {
    if (!(level >= 0.0 && level <= 1.0)) bad("sweep.levels", "levels must be in [0, 1]");
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const Error& e) {
    fail(e.kind(), path.string() + ": " + e.what());
  }
}

namespace {

json layer_json(const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::conv_block:
      return {{"type", "conv"}, {"channels", l.channels}, {"group", l.group_id}, {"kernel", l.kernel}};
    case LayerKind::maxpool:
      return {{"type", "pool"}, {"window", l.window}};
    case LayerKind::flatten:
      return {{"type", "flatten"}};
    case LayerKind::dropout:
      return {{"type", "dropout"}, {"rate", l.rate}};
    case LayerKind::linear:
      return {{"type", "linear"}, {"units", l.units}};
  }
  return {};
}

}  // namespace

json config_echo(const ExperimentConfig& cfg, const ArchSpec& arch) {
  json a;
  a["input"] = {{"channels", arch.in_channels}, {"height", arch.in_height}, {"width", arch.in_width}};
  a["trunk"] = json::array();
  for (const auto& l : arch.trunk) a["trunk"].push_back(layer_json(l));
  a["head"] = json::array();
  for (const auto& l : arch.head) a["head"].push_back(layer_json(l));

  const TrainConfig& t = cfg.train;
  json train = {{"epochs", t.epochs},   {"batch_size", t.batch_size},
                {"lr0", t.lr0},         {"milestones", t.milestones},
                {"decay", t.decay},     {"momentum", t.momentum},
                {"weight_decay", t.weight_decay}, {"seed", t.seed},
                {"precision", t.precision}};

  const LossConfig& l = cfg.loss;
  json schedule = json::array();
  for (const auto& [p, q] : l.pull_push_schedule) schedule.push_back({p, q});
  json loss = {{"active", active_names(l)},
               {"K", l.K},
               {"T", l.T},
               {"alpha_out", l.alpha_out},
               {"alpha_mid", l.alpha_mid},
               {"beta_mid", l.beta_mid},
               {"w_pp", l.w_pp},
               {"pull_push_schedule", schedule},
               {"lambda_kernel", l.lambda_kernel},
               {"kernel_groups", l.resolved_kernel_groups(arch)},
               {"mid_target_includes_self", l.mid_target_includes_self}};

  json noise = {{"level", cfg.noise.level}, {"reshuffle_per_epoch", cfg.noise.reshuffle_per_epoch}};

  json data;
  if (cfg.data.synthetic) {
    const SyntheticSpec& s = cfg.data.spec;
    data["synthetic"] = {{"classes", s.classes},     {"train_per_class", s.train_per_class},
                         {"test_per_class", s.test_per_class}, {"channels", s.channels},
                         {"height", s.height},       {"width", s.width},
                         {"signal", s.signal},       {"noise_sigma", s.noise_sigma},
                         {"seed", s.seed}};
  } else {
    data["train_file"] = cfg.data.train_file.string();
    data["test_file"] = cfg.data.test_file.string();
  }
  return {{"arch", a}, {"train", train}, {"loss", loss}, {"noise", noise}, {"data", data}};
}

void validate_loss(const LossConfig& loss, const ArchSpec& arch, std::size_t classes) {
  // Building shape-checks the architecture; the seed is irrelevant here.
  const Network<float> probe = build_network<float>(arch, classes, 0);
  loss.validate(probe.depth(), probe.dropout_count());
  if (loss.kernel) {
    const auto groups = loss.resolved_kernel_groups(arch);
    bool any = false;
    for (const auto& l : arch.trunk) {
      any = any || (l.kind == LayerKind::conv_block &&
                    std::find(groups.begin(), groups.end(), l.group_id) != groups.end());
    }
    if (!any) fail(ErrorKind::config, "loss.kernel_groups: no conv block belongs to the selected groups");
  }
}

Prepared prepare(const ExperimentConfig& cfg) {
  Prepared p;
  if (cfg.data.synthetic) {
    p.data = generate_synthetic(cfg.data.spec);
  } else {
    p.data.train = load_dataset(cfg.data.train_file);
    p.data.test = load_dataset(cfg.data.test_file);
    const Dataset& a = p.data.train;
    const Dataset& b = p.data.test;
    if (a.classes != b.classes || a.channels != b.channels || a.height != b.height ||
        a.width != b.width) {
      fail(ErrorKind::config, "data: train and test files disagree on classes or image extents");
    }
  }
  const Dataset& train = p.data.train;
  if (cfg.arch) {
    p.arch = *cfg.arch;
  } else {
    p.arch = ArchSpec::desk_default(train.classes);
    p.arch.in_channels = train.channels;
    p.arch.in_height = train.height;
    p.arch.in_width = train.width;
  }
  if (p.arch.in_channels != train.channels || p.arch.in_height != train.height ||
      p.arch.in_width != train.width) {
    fail(ErrorKind::config, "arch.input " + shape_str({p.arch.in_channels, p.arch.in_height, p.arch.in_width}) +
                                " does not match the data " +
                                shape_str({train.channels, train.height, train.width}));
  }
  validate_loss(cfg.loss, p.arch, train.classes);
  return p;
}

}  // namespace collab::cli
