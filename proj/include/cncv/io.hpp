#pragma once

// Checkpoints (versioned JSON), CSV tables and dataset files.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "cncv/config.hpp"
#include "cncv/model.hpp"
#include "cncv/training.hpp"

namespace cncv {

inline constexpr int kCheckpointVersion = 1;

struct CheckpointMeta {
  double final_loss = 0.0;
  double final_val_loss = 0.0;
  long samples_seen = 0;
  std::uint64_t seed = 0;
};

struct Checkpoint {
  ExperimentConfig config;
  CvEnsemble ensemble;
  CheckpointMeta meta;
};

/// 17 significant digits, enough to round-trip any double.
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline Json checkpoint_to_json(const Checkpoint& c) {
  Json j;
  j["format_version"] = kCheckpointVersion;
  j["config"] = to_json(c.config);
  const ModelShape& s = c.ensemble.tree->shape();
  j["shape"] = Json{{"dim", s.dim},
                    {"cond_dim", s.cond_dim},
                    {"depth", s.depth},
                    {"hidden_units", s.hidden_units},
                    {"mlp_layers", s.mlp_layers}};
  Json members = Json::array();
  for (const auto& m : c.ensemble.members) {
    Json params;
    for (std::size_t i = 0; i < m.params.slices().size(); ++i) {
      const auto v = m.params.view(i);
      params[m.params.slice(i).name] = std::vector<double>(v.begin(), v.end());
    }
    members.push_back(Json{{"permutation", m.perm}, {"parameters", params}});
  }
  j["members"] = members;
  j["metadata"] = Json{{"final_loss", c.meta.final_loss},
                       {"final_val_loss", c.meta.final_val_loss},
                       {"samples_seen", c.meta.samples_seen},
                       {"seed", c.meta.seed},
                       {"config_hash", config_hash(c.config)}};
  return j;
}

inline Checkpoint checkpoint_from_json(const Json& j) {
  try {
    Checkpoint c;
    if (!j.is_object() || !j.contains("format_version")) throw IoError("checkpoint: missing format_version");
    if (j.at("format_version").get<int>() != kCheckpointVersion) {
      throw IoError("checkpoint: unsupported format_version " + j.at("format_version").dump());
    }
    c.config = config_from_json(j.at("config"));
    const Json& s = j.at("shape");
    const ModelShape shape{s.at("dim").get<int>(), s.at("cond_dim").get<int>(), s.at("depth").get<int>(),
                           s.at("hidden_units").get<int>(), s.at("mlp_layers").get<int>()};
    c.ensemble.tree = std::make_shared<const HintTree>(shape);
    const HintTree& tree = *c.ensemble.tree;
    for (const Json& mj : j.at("members")) {
      PermutedTree m;
      m.params = tree.layout();
      auto perm = mj.at("permutation").get<std::vector<std::size_t>>();
      require_dims(perm.size(), static_cast<std::size_t>(shape.dim), "checkpoint permutation");
      m.set_permutation(std::move(perm));
      const Json& pj = mj.at("parameters");
      if (pj.size() != m.params.slices().size()) throw StructuralError("checkpoint: parameter slice count mismatch");
      for (std::size_t i = 0; i < m.params.slices().size(); ++i) {
        const auto& slice = m.params.slice(i);
        const auto values = pj.at(slice.name).get<std::vector<double>>();
        require_dims(values.size(), slice.length, ("checkpoint slice " + slice.name).c_str());
        auto view = m.params.view(i);
        std::copy(values.begin(), values.end(), view.begin());
      }
      c.ensemble.members.push_back(std::move(m));
    }
    if (c.ensemble.members.empty()) throw StructuralError("checkpoint: no ensemble members");
    const Json& md = j.at("metadata");
    c.meta.final_loss = md.at("final_loss").is_null() ? NAN : md.at("final_loss").get<double>();
    c.meta.final_val_loss = md.at("final_val_loss").is_null() ? NAN : md.at("final_val_loss").get<double>();
    c.meta.samples_seen = md.at("samples_seen").get<long>();
    c.meta.seed = md.at("seed").get<std::uint64_t>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: malformed (") + e.what() + ")");
  } catch (const StructuralError& e) {
    throw IoError(std::string("checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  write_text_file(path, checkpoint_to_json(c).dump(1) + "\n");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  const std::string text = read_text_file(path);
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    throw IoError("checkpoint '" + path + "' is not valid JSON");
  }
  return checkpoint_from_json(j);
}

// --- CSV -----------------------------------------------------------------------

/// CSV writer: a `# config_hash:` provenance line, a header row, then rows.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header, const std::string& hash)
      : out_(path, std::ios::binary), path_(path), columns_(header.size()) {
    if (!out_) throw IoError("cannot write '" + path + "'");
    out_ << "# config_hash: " << hash << "\n";
    write_row(header);
  }

  CsvWriter& operator<<(double v) { return cell(format_double(v)); }
  CsvWriter& operator<<(long v) { return cell(std::to_string(v)); }
  CsvWriter& operator<<(int v) { return cell(std::to_string(v)); }
  CsvWriter& operator<<(std::size_t v) { return cell(std::to_string(v)); }
  CsvWriter& operator<<(const std::string& v) { return cell(v); }
  CsvWriter& operator<<(const char* v) { return cell(v); }

  /// Terminates the current row; throws if it has the wrong width.
  void end_row() {
    if (row_.size() != columns_) throw StructuralError("csv '" + path_ + "': row width mismatch");
    write_row(row_);
    row_.clear();
  }

  void close() {
    out_.flush();
    if (!out_) throw IoError("write failed for '" + path_ + "'");
    out_.close();
  }

 private:
  CsvWriter& cell(std::string s) {
    row_.push_back(std::move(s));
    return *this;
  }
  void write_row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << "\n";
  }

  std::ofstream out_;
  std::string path_;
  std::size_t columns_;
  std::vector<std::string> row_;
};

struct CsvTable {
  std::string config_hash;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw StructuralError("csv: no column '" + name + "'");
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  CsvTable t;
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("# config_hash: ", 0) == 0) {
      t.config_hash = line.substr(15);
      continue;
    }
    if (!line.empty() && line[0] == '#') continue;
    if (t.header.empty()) {
      t.header = split_csv_line(line);
    } else {
      t.rows.push_back(split_csv_line(line));
    }
  }
  return t;
}

// --- datasets and curves ---------------------------------------------------------

inline std::vector<std::string> dataset_header(Eigen::Index d, Eigen::Index m) {
  std::vector<std::string> h;
  for (Eigen::Index i = 0; i < d; ++i) h.push_back("x_" + std::to_string(i));
  for (Eigen::Index i = 0; i < m; ++i) h.push_back("y_" + std::to_string(i));
  for (Eigen::Index i = 0; i < d; ++i) h.push_back("score_" + std::to_string(i));
  return h;
}

inline void write_dataset(const Dataset& ds, const std::string& path, const std::string& hash) {
  CsvWriter w(path, dataset_header(ds.x.rows(), ds.y.rows()), hash);
  for (Eigen::Index j = 0; j < ds.size(); ++j) {
    for (Eigen::Index i = 0; i < ds.x.rows(); ++i) w << ds.x(i, j);
    for (Eigen::Index i = 0; i < ds.y.rows(); ++i) w << ds.y(i, j);
    for (Eigen::Index i = 0; i < ds.scores.rows(); ++i) w << ds.scores(i, j);
    w.end_row();
  }
  w.close();
}

inline Dataset read_dataset(const std::string& path) {
  const CsvTable t = read_csv(path);
  Eigen::Index d = 0, m = 0;
  for (const auto& h : t.header) {
    if (h.rfind("x_", 0) == 0) ++d;
    if (h.rfind("y_", 0) == 0) ++m;
  }
  if (t.header != dataset_header(d, m)) throw IoError("dataset '" + path + "': unexpected header");
  Dataset ds;
  const auto n = static_cast<Eigen::Index>(t.rows.size());
  ds.x.resize(d, n);
  ds.y.resize(m, n);
  ds.scores.resize(d, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const auto& r = t.rows[static_cast<std::size_t>(j)];
    if (static_cast<Eigen::Index>(r.size()) != 2 * d + m) throw IoError("dataset '" + path + "': short row");
    for (Eigen::Index i = 0; i < d; ++i) ds.x(i, j) = std::stod(r[static_cast<std::size_t>(i)]);
    for (Eigen::Index i = 0; i < m; ++i) ds.y(i, j) = std::stod(r[static_cast<std::size_t>(d + i)]);
    for (Eigen::Index i = 0; i < d; ++i) ds.scores(i, j) = std::stod(r[static_cast<std::size_t>(d + m + i)]);
  }
  return ds;
}

inline void write_training_curve(const std::vector<CurveRow>& curve, const std::string& path,
                                 const std::string& hash) {
  CsvWriter w(path, {"samples_seen", "batch_loss", "epoch", "val_loss", "lr"}, hash);
  for (const auto& r : curve) {
    w << r.samples_seen << r.batch_loss << r.epoch << (r.val_loss ? format_double(*r.val_loss) : std::string()) << r.lr;
    w.end_row();
  }
  w.close();
}

inline void write_eval_report(const EvalReport& rep, const std::string& path, const std::string& hash) {
  CsvWriter w(path, {"obs_id", "component", "var_h", "var_hg", "vrf", "corr", "raw_est", "cv_est", "n", "seed"},
              hash);
  for (const auto& r : rep.rows) {
    w << r.obs_id << r.component << r.stats.var_h << r.stats.var_hg << r.stats.vrf << r.stats.corr
      << r.stats.raw_estimate << r.stats.cv_estimate << r.n_samples << r.seed;
    w.end_row();
  }
  w.close();
}

}  // namespace cncv
