#pragma once

// Experiment configuration: a strict JSON schema with defaults taken from the
// standard stylized-experiment hyperparameters. Unknown keys are rejected.

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cncv/errors.hpp"
#include "cncv/evaluation.hpp"
#include "cncv/problems.hpp"
#include "cncv/training.hpp"

namespace cncv {

using Json = nlohmann::ordered_json;

struct ProblemConfig {
  ProblemKind kind = ProblemKind::Gaussian;
  int dim = 2;
  double sigma = 0.3;
  std::uint64_t seed = 12;
  RosenbrockParams rosenbrock;
  bool operator==(const ProblemConfig& o) const {
    return kind == o.kind && dim == o.dim && sigma == o.sigma && seed == o.seed && rosenbrock.mu == o.rosenbrock.mu &&
           rosenbrock.a == o.rosenbrock.a && rosenbrock.b == o.rosenbrock.b;
  }
};

struct ModelConfig {
  int ensemble_size = 16;
  int depth = 2;
  int hidden_units = 64;
  int mlp_layers = 3;
  bool operator==(const ModelConfig&) const = default;
};

struct TrainBlock {
  int batch_size = 2048;
  int epochs = 50;
  double lr_init = 1e-3;
  double lr_final = 1e-4;
  int n_train_samples = 65536;
  std::uint64_t seed = 12;
  double validation_fraction = 0.1;
  double grad_clip = 10.0;
  int chunk_size = 256;
  int threads = 1;
  bool operator==(const TrainBlock&) const = default;
};

struct EvalBlock {
  int n_obs = 100;
  int n_samples = 5000;
  std::uint64_t seed = 2024;
  int stein_n_obs = 250;
  std::vector<int> sample_sizes{10, 30, 100, 300, 1000, 5000};
  int sweep_n_obs = 20;
  int repeats = 50;
  std::vector<int> ensemble_sizes{1, 2, 4, 8, 16};
  std::vector<std::uint64_t> ablation_seeds{12, 13, 14};
  int ablation_n_obs = 20;
  int center_samples = 100000;
  int reference_samples = 1000000;
  bool operator==(const EvalBlock&) const = default;
};

struct OutputBlock {
  std::string dir = "out";
  std::string checkpoint = "checkpoint.json";
  bool operator==(const OutputBlock&) const = default;
};

struct ExperimentConfig {
  std::string name = "experiment";
  ProblemConfig problem;
  ModelConfig model;
  TrainBlock train;
  EvalBlock eval;
  QoiKind qoi = QoiKind::Mean;
  OutputBlock output;
  bool operator==(const ExperimentConfig&) const = default;

  void validate() const {
    if (problem.dim < 1) throw ConfigError("problem.dim: must be >= 1");
    if (problem.kind == ProblemKind::Rosenbrock && problem.dim != 2) throw ConfigError("problem.dim: rosenbrock requires 2");
    if (!(problem.sigma > 0.0)) throw ConfigError("problem.sigma: must be > 0");
    if (eval.n_obs < 1 || eval.n_samples < 2 || eval.stein_n_obs < 1 || eval.repeats < 1 || eval.sweep_n_obs < 1 ||
        eval.ablation_n_obs < 1 || eval.center_samples < 2 || eval.reference_samples < 2) {
      throw ConfigError("eval: sizes must be positive (n_samples >= 2)");
    }
    for (int n : eval.sample_sizes)
      if (n < 2) throw ConfigError("eval.sample_sizes: entries must be >= 2");
    for (int l : eval.ensemble_sizes)
      if (l < 1) throw ConfigError("eval.ensemble_sizes: entries must be >= 1");
    train_config().validate();
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.batch_size = train.batch_size;
    t.epochs = train.epochs;
    t.lr_init = train.lr_init;
    t.lr_final = train.lr_final;
    t.n_train_samples = train.n_train_samples;
    t.seed = train.seed;
    t.validation_fraction = train.validation_fraction;
    t.grad_clip = train.grad_clip;
    t.chunk_size = train.chunk_size;
    t.threads = train.threads;
    t.ensemble_size = model.ensemble_size;
    t.depth = model.depth;
    t.hidden_units = model.hidden_units;
    t.mlp_layers = model.mlp_layers;
    return t;
  }

  VrfStudyConfig vrf_config() const {
    return VrfStudyConfig{eval.n_obs, eval.n_samples, eval.seed, eval.center_samples, qoi};
  }
};

inline InverseProblem make_problem(const ProblemConfig& p) {
  switch (p.kind) {
    case ProblemKind::Gaussian: return InverseProblem::gaussian(p.dim, p.sigma, p.seed);
    case ProblemKind::Rosenbrock: return InverseProblem::rosenbrock(p.rosenbrock, p.sigma, p.seed);
    case ProblemKind::Nonlinear: return InverseProblem::nonlinear(p.dim, p.sigma, p.seed);
  }
  throw ConfigError("problem.kind: unsupported");
}

// --- JSON mapping --------------------------------------------------------------

namespace detail {

/// Reads fields from one JSON object, tracking which keys were consumed.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_same_v<T, double>) {
        if (!it->is_number()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_integer()) throw ConfigError("");
        if constexpr (std::is_unsigned_v<T>) {
          if (it->is_number_integer() && !it->is_number_unsigned()) throw ConfigError("");
        }
      }
      out = it->template get<T>();
    } catch (const std::exception&) {
      throw ConfigError(field(key) + ": wrong type (got " + std::string(it->type_name()) + ")");
    }
  }

  const Json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string field(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(field(it.key().c_str()) + ": unknown key");
    }
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline Json to_json(const ExperimentConfig& c) {
  Json j;
  j["name"] = c.name;
  Json p;
  p["kind"] = std::string(to_string(c.problem.kind));
  p["dim"] = c.problem.dim;
  p["sigma"] = c.problem.sigma;
  p["seed"] = c.problem.seed;
  if (c.problem.kind == ProblemKind::Rosenbrock) {
    p["params"] = Json{{"mu", c.problem.rosenbrock.mu}, {"a", c.problem.rosenbrock.a}, {"b", c.problem.rosenbrock.b}};
  }
  j["problem"] = p;
  j["model"] = Json{{"ensemble_size", c.model.ensemble_size},
                    {"depth", c.model.depth},
                    {"hidden_units", c.model.hidden_units},
                    {"mlp_layers", c.model.mlp_layers}};
  const auto& t = c.train;
  j["train"] = Json{{"batch_size", t.batch_size},       {"epochs", t.epochs},
                    {"lr_init", t.lr_init},             {"lr_final", t.lr_final},
                    {"n_train_samples", t.n_train_samples}, {"seed", t.seed},
                    {"validation_fraction", t.validation_fraction}, {"grad_clip", t.grad_clip},
                    {"chunk_size", t.chunk_size},       {"threads", t.threads}};
  const auto& e = c.eval;
  j["eval"] = Json{{"n_obs", e.n_obs},
                   {"n_samples", e.n_samples},
                   {"seed", e.seed},
                   {"stein_n_obs", e.stein_n_obs},
                   {"sample_sizes", e.sample_sizes},
                   {"sweep_n_obs", e.sweep_n_obs},
                   {"repeats", e.repeats},
                   {"ensemble_sizes", e.ensemble_sizes},
                   {"ablation_seeds", e.ablation_seeds},
                   {"ablation_n_obs", e.ablation_n_obs},
                   {"center_samples", e.center_samples},
                   {"reference_samples", e.reference_samples}};
  j["qoi"] = Json{{"kind", std::string(to_string(c.qoi))}};
  j["output"] = Json{{"dir", c.output.dir}, {"checkpoint", c.output.checkpoint}};
  return j;
}

inline ExperimentConfig config_from_json(const Json& j) {
  ExperimentConfig c;
  detail::ObjectReader root(j, "");
  root.get("name", c.name);
  if (const Json* p = root.child("problem")) {
    detail::ObjectReader r(*p, "problem");
    std::string kind = std::string(to_string(c.problem.kind));
    r.get("kind", kind);
    try {
      c.problem.kind = problem_kind_from_string(kind);
    } catch (const ConfigError& e) {
      throw ConfigError("problem.kind: " + std::string(e.what()));
    }
    if (c.problem.kind == ProblemKind::Rosenbrock) c.problem.dim = 2;
    r.get("dim", c.problem.dim);
    r.get("sigma", c.problem.sigma);
    r.get("seed", c.problem.seed);
    if (const Json* q = r.child("params")) {
      if (c.problem.kind != ProblemKind::Rosenbrock) throw ConfigError("problem.params: only valid for rosenbrock");
      detail::ObjectReader rp(*q, "problem.params");
      rp.get("mu", c.problem.rosenbrock.mu);
      rp.get("a", c.problem.rosenbrock.a);
      rp.get("b", c.problem.rosenbrock.b);
      rp.finish();
    }
    r.finish();
  }
  if (const Json* m = root.child("model")) {
    detail::ObjectReader r(*m, "model");
    r.get("ensemble_size", c.model.ensemble_size);
    r.get("depth", c.model.depth);
    r.get("hidden_units", c.model.hidden_units);
    r.get("mlp_layers", c.model.mlp_layers);
    r.finish();
  }
  if (const Json* t = root.child("train")) {
    detail::ObjectReader r(*t, "train");
    r.get("batch_size", c.train.batch_size);
    r.get("epochs", c.train.epochs);
    r.get("lr_init", c.train.lr_init);
    r.get("lr_final", c.train.lr_final);
    r.get("n_train_samples", c.train.n_train_samples);
    r.get("seed", c.train.seed);
    r.get("validation_fraction", c.train.validation_fraction);
    r.get("grad_clip", c.train.grad_clip);
    r.get("chunk_size", c.train.chunk_size);
    r.get("threads", c.train.threads);
    r.finish();
  }
  if (const Json* e = root.child("eval")) {
    detail::ObjectReader r(*e, "eval");
    r.get("n_obs", c.eval.n_obs);
    r.get("n_samples", c.eval.n_samples);
    r.get("seed", c.eval.seed);
    r.get("stein_n_obs", c.eval.stein_n_obs);
    r.get("sample_sizes", c.eval.sample_sizes);
    r.get("sweep_n_obs", c.eval.sweep_n_obs);
    r.get("repeats", c.eval.repeats);
    r.get("ensemble_sizes", c.eval.ensemble_sizes);
    r.get("ablation_seeds", c.eval.ablation_seeds);
    r.get("ablation_n_obs", c.eval.ablation_n_obs);
    r.get("center_samples", c.eval.center_samples);
    r.get("reference_samples", c.eval.reference_samples);
    r.finish();
  }
  if (const Json* q = root.child("qoi")) {
    detail::ObjectReader r(*q, "qoi");
    std::string kind = "mean";
    r.get("kind", kind);
    try {
      c.qoi = qoi_kind_from_string(kind);
    } catch (const ConfigError& e) {
      throw ConfigError("qoi.kind: " + std::string(e.what()));
    }
    r.finish();
  }
  if (const Json* o = root.child("output")) {
    detail::ObjectReader r(*o, "output");
    r.get("dir", c.output.dir);
    r.get("checkpoint", c.output.checkpoint);
    r.finish();
  }
  root.finish();
  c.validate();
  return c;
}

inline Json parse_json_text(const std::string& text, const std::string& source) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    const std::size_t upto = std::min<std::size_t>(e.byte, text.size());
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < upto; ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError(source + ":" + std::to_string(line) + ":" + std::to_string(col) + ": JSON syntax error");
  }
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline ExperimentConfig config_from_string(const std::string& text, const std::string& source = "<config>") {
  return config_from_json(parse_json_text(text, source));
}

inline ExperimentConfig load_config(const std::string& path) {
  const std::string text = read_text_file(path);
  try {
    return config_from_string(text, path);
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    if (msg.rfind(path, 0) == 0) throw;
    throw ConfigError(path + ": " + msg);
  }
}

inline std::string config_to_string(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001B3ULL;
  }
  return h;
}

/// Hex FNV-1a of the canonical compact serialisation.
inline std::string config_hash(const ExperimentConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(to_json(c).dump())));
  return buf;
}

}  // namespace cncv
