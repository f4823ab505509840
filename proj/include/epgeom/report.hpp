#pragma once

// Report document: canonical JSON (sorted keys, 9 significant digits,
// "inf"/"-inf" strings for infinities, null for absent values), a declarative
// schema that drives validation and CSV headers, and CSV table emission.

#include "epgeom/core.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>

namespace ep {

inline constexpr const char* kSchemaVersion = "1.0";

enum class ColumnType { Int, Number, String };

struct ColumnSchema {
  std::string name;
  ColumnType type = ColumnType::Number;
  std::string metric_id;  // empty for key columns
  bool nullable = false;
};

struct TableSchema {
  std::string name;
  std::vector<ColumnSchema> columns;
};

struct SectionSchema {
  std::string name;
  std::vector<TableSchema> tables;  // the first table carries the section's name
};

namespace detail {

inline ColumnSchema key_int(std::string n) { return {std::move(n), ColumnType::Int, "", false}; }
inline ColumnSchema key_str(std::string n) { return {std::move(n), ColumnType::String, "", false}; }
inline ColumnSchema num(std::string n, std::string id, bool nullable = false) { return {std::move(n), ColumnType::Number, std::move(id), nullable}; }
inline ColumnSchema cnt(std::string n, std::string id, bool nullable = false) { return {std::move(n), ColumnType::Int, std::move(id), nullable}; }

}  // namespace detail

inline const std::vector<SectionSchema>& report_schema() {
  using namespace detail;
  static const std::vector<SectionSchema> s = {
      {"boundary",
       {{"boundary",
         {key_int("layer"), num("norm", "geometry.boundary_vector"), num("stability", "geometry.boundary_stability", true),
          num("projection_factual", "geometry.residual_projection", true),
          num("projection_hallucination", "geometry.residual_projection", true),
          num("projection_impossible", "geometry.residual_projection", true), num("drift_factual", "geometry.drift_cosine", true),
          num("drift_hallucination", "geometry.drift_cosine", true), num("drift_impossible", "geometry.drift_cosine", true)}}}},
      {"lid",
       {{"lid",
         {key_int("layer"), key_str("bucket"), num("mean_lid", "dimensionality.lid_mle"), num("median_lid", "dimensionality.lid_mle"),
          cnt("k", "dimensionality.lid_mle"), num("isotropy", "dimensionality.spectral_summary", true),
          num("spectral_entropy", "dimensionality.spectral_summary", true), num("n_eff", "dimensionality.spectral_summary", true),
          cnt("pca90", "dimensionality.spectral_summary", true)}},
        {"ratio", {key_int("layer"), key_str("group"), num("lid_ratio", "dimensionality.lid_mle")}}}},
      {"spectrum",
       {{"spectrum",
         {key_int("layer"), key_str("bucket"), key_int("index"), num("eigenvalue", "dimensionality.spectral_summary"),
          num("cumulative_fraction", "dimensionality.spectral_summary")}}}},
      {"topology",
       {{"topology",
         {key_int("layer"), cnt("n_points", "topology.boundary_band"), num("scale", "topology.betti_at_scale"),
          num("max_scale", "topology.rips_persistence"), cnt("beta0", "topology.betti_at_scale"), cnt("beta1", "topology.betti_at_scale"),
          cnt("pairs_dim0", "topology.rips_persistence"), cnt("pairs_dim1", "topology.rips_persistence"),
          num("max_persistence_dim1", "topology.rips_persistence", true)}},
        {"diagrams", {key_int("layer"), key_int("dim"), num("birth", "topology.rips_persistence"), num("death", "topology.rips_persistence")}}}},
      {"readout",
       {{"readout",
         {key_int("layer"), key_int("m"), num("vis_b", "readout.visibility"), num("lowsens_b", "readout.visibility"),
          num("lowsens_ratio_factual", "readout.lowsens_ratio", true), num("lowsens_ratio_uncertain", "readout.lowsens_ratio", true)}},
        {"singular_values", {key_int("index"), num("sigma", "readout.svd_readout")}},
        {"lens",
         {key_int("layer"), key_str("bucket"), num("entropy_mean", "readout.logit_lens"), num("confidence_mean", "readout.logit_lens")}}}},
      {"probes",
       {{"probes",
         {key_int("layer"), num("fisher_b", "probes.fisher_sensitivity"), num("fisher_r", "probes.fisher_sensitivity"),
          num("hessian_b", "probes.hessian_curvature"), num("hessian_r", "probes.hessian_curvature"),
          num("amp_b", "probes.jacobian_amplification", true), num("amp_r", "probes.jacobian_amplification", true),
          num("blockage", "probes.gradient_blockage", true)}},
        {"steering",
         {key_int("layer"), num("alpha", "probes.steering_sweep"), num("kl_b", "probes.steering_sweep"), num("flip_b", "probes.steering_sweep"),
          num("kl_r", "probes.steering_sweep"), num("flip_r", "probes.steering_sweep")}}}},
      {"components",
       {{"components",
         {key_int("layer"), key_str("bucket"), num("attn_entropy", "components.attention_entropy", true),
          num("sink", "components.sink_mass", true), num("attn_align", "components.residual_alignment", true),
          num("mlp_align", "components.residual_alignment", true), num("kurtosis_mean", "components.kurtosis", true),
          num("gini_mean", "components.gini", true), num("surprisal_mean", "components.surprisal_and_entropy", true),
          num("entropy_mean", "components.surprisal_and_entropy", true)}},
        {"head_divergence", {key_int("layer"), key_int("rank"), key_int("head"), num("divergence", "components.head_entropy_divergence")}}}},
      {"selectivity",
       {{"selectivity",
         {key_int("layer"), key_str("source"), key_int("rank"), key_int("neuron"), num("score", "components.neuron_selectivity")}}}},
      {"interventions",
       {{"probe", {key_int("layer"), num("train_acc", "interventions.train_linear_probe"), num("final_loss", "interventions.train_linear_probe")}},
        {"bypass",
         {num("gamma", "interventions.readout_bypass"), num("baseline_refusal", "interventions.behavioral_eval"),
          num("bypass_refusal", "interventions.behavioral_eval")}},
        {"steering",
         {num("alpha", "interventions.steer"), num("output_change", "interventions.behavioral_eval"),
          num("loop_rate", "interventions.behavioral_eval")}},
        {"repair",
         {num("lambda", "interventions.manifold_repair"), cnt("k", "interventions.factual_subspace"),
          num("baseline_loop", "interventions.behavioral_eval"), num("repaired_loop", "interventions.behavioral_eval")}}}},
  };
  return s;
}

inline const SectionSchema& section_schema(const std::string& name) {
  for (const auto& s : report_schema())
    if (s.name == name) return s;
  throw ConfigError("unknown report section '" + name + "'");
}

inline const TableSchema& table_schema(const SectionSchema& s, const std::string& name) {
  for (const auto& t : s.tables)
    if (t.name == name) return t;
  throw ConfigError("unknown table '" + name + "' in section '" + s.name + "'");
}

// ---------------------------------------------------------------------------
// Canonical values
// ---------------------------------------------------------------------------

/// Rounds to 9 significant digits; idempotent.
inline double canonical_double(double v) {
  if (!std::isfinite(v)) return v;
  if (v == 0.0) return 0.0;
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return std::strtod(buf, nullptr);
}

inline nlohmann::json jnum(double v) {
  if (std::isnan(v)) return nullptr;
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return canonical_double(v);
}

inline nlohmann::json jnum(const std::optional<double>& v) { return v ? jnum(*v) : nlohmann::json(nullptr); }

inline double json_to_double(const nlohmann::json& j) {
  if (j.is_string()) {
    if (j == "inf") return kInf;
    if (j == "-inf") return -kInf;
  }
  if (j.is_number()) return j.get<double>();
  throw ValidationError("report: expected a number, got " + j.dump());
}

/// Recursively replaces floats with their canonical rounding.
inline void canonicalize(nlohmann::json& j) {
  if (j.is_number_float()) {
    const double v = j.get<double>();
    j = jnum(v);
  } else if (j.is_object() || j.is_array()) {
    for (auto& x : j) canonicalize(x);
  }
}

// ---------------------------------------------------------------------------
// Document
// ---------------------------------------------------------------------------

struct ReportDocument {
  nlohmann::json doc = nlohmann::json::object();  // canonical

  friend bool operator==(const ReportDocument& a, const ReportDocument& b) { return a.doc == b.doc; }
};

class SectionBuilder {
 public:
  explicit SectionBuilder(const std::string& name) : schema_(&section_schema(name)) {
    for (const auto& t : schema_->tables) body_[t.name] = nlohmann::json::array();
  }

  /// Adds a row; every schema column must be provided.
  void add(const std::string& table, nlohmann::json row) {
    const auto& t = table_schema(*schema_, table);
    for (const auto& c : t.columns)
      if (!row.contains(c.name)) throw ConfigError("report row for " + schema_->name + "." + table + " lacks column " + c.name);
    canonicalize(row);
    body_[table].push_back(std::move(row));
  }

  nlohmann::json finish() const {
    nlohmann::json out = body_;
    nlohmann::json ids = nlohmann::json::object();
    for (const auto& t : schema_->tables)
      for (const auto& c : t.columns)
        if (!c.metric_id.empty()) ids[t.name + "." + c.name] = c.metric_id;
    out["metric_ids"] = ids;
    return out;
  }

 private:
  const SectionSchema* schema_;
  nlohmann::json body_ = nlohmann::json::object();
};

namespace detail {

inline void check_cell(const nlohmann::json& v, const ColumnSchema& c, const std::string& where) {
  const auto fail = [&](const std::string& why) { throw ValidationError("report schema: " + where + "." + c.name + " " + why); };
  if (v.is_null()) {
    if (!c.nullable) fail("must not be null");
    return;
  }
  switch (c.type) {
    case ColumnType::Int:
      if (!v.is_number_integer()) fail("must be an integer");
      break;
    case ColumnType::String:
      if (!v.is_string()) fail("must be a string");
      break;
    case ColumnType::Number:
      if (v.is_string() ? (v != "inf" && v != "-inf") : !v.is_number()) fail("must be a number or an infinity marker");
      if (v.is_number_float() && !std::isfinite(v.get<double>())) fail("must be finite");
      break;
  }
}

}  // namespace detail

/// Structural check against report_schema(): known sections, exact column sets,
/// per-column types, metric ids.
inline void validate_report(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ValidationError("report schema: document must be an object");
  if (!doc.contains("schema_version") || doc["schema_version"] != kSchemaVersion)
    throw ValidationError("report schema: missing or unsupported schema_version");
  if (!doc.contains("config") || !doc["config"].is_object()) throw ValidationError("report schema: missing config echo");
  if (!doc.contains("sections") || !doc["sections"].is_object()) throw ValidationError("report schema: missing sections");
  for (const auto& [key, v] : doc.items())
    if (key != "schema_version" && key != "config" && key != "sections") throw ValidationError("report schema: unexpected top-level key " + key);
  for (const auto& [name, body] : doc["sections"].items()) {
    const auto* schema = [&]() -> const SectionSchema* {
      for (const auto& s : report_schema())
        if (s.name == name) return &s;
      return nullptr;
    }();
    if (!schema) throw ValidationError("report schema: unknown section " + name);
    if (!body.is_object()) throw ValidationError("report schema: section " + name + " must be an object");
    if (body.size() != schema->tables.size() + 1 || !body.contains("metric_ids"))
      throw ValidationError("report schema: section " + name + " has the wrong set of tables");
    for (const auto& t : schema->tables) {
      if (!body.contains(t.name) || !body[t.name].is_array()) throw ValidationError("report schema: " + name + "." + t.name + " must be an array");
      const std::string where = name + "." + t.name;
      for (const auto& row : body[t.name]) {
        if (!row.is_object() || row.size() != t.columns.size()) throw ValidationError("report schema: " + where + " row has wrong columns");
        for (const auto& c : t.columns) {
          if (!row.contains(c.name)) throw ValidationError("report schema: " + where + " row lacks " + c.name);
          detail::check_cell(row[c.name], c, where);
        }
      }
      for (const auto& c : t.columns)
        if (!c.metric_id.empty() && body["metric_ids"].value(t.name + "." + c.name, std::string()) != c.metric_id)
          throw ValidationError("report schema: metric id for " + where + "." + c.name + " is missing or wrong");
    }
  }
}

/// Assembles and validates a canonical document.
inline ReportDocument make_report(nlohmann::json config, nlohmann::json sections) {
  ReportDocument r;
  canonicalize(config);
  canonicalize(sections);
  r.doc = {{"schema_version", kSchemaVersion}, {"config", std::move(config)}, {"sections", std::move(sections)}};
  validate_report(r.doc);
  return r;
}

inline std::string to_json(const ReportDocument& r) { return r.doc.dump(2) + "\n"; }

inline ReportDocument parse_report(const std::string& text) {
  ReportDocument r;
  try {
    r.doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("report: malformed JSON: ") + e.what());
  }
  validate_report(r.doc);
  canonicalize(r.doc);
  return r;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

inline std::string csv_cell(const nlohmann::json& v) {
  if (v.is_null()) return "";
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
  }
  return v.dump();
}

inline std::string table_csv(const nlohmann::json& rows, const TableSchema& t) {
  std::string out;
  for (std::size_t i = 0; i < t.columns.size(); ++i) out += (i ? "," : "") + t.columns[i].name;
  out += "\n";
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < t.columns.size(); ++i) out += (i ? "," : "") + csv_cell(row[t.columns[i].name]);
    out += "\n";
  }
  return out;
}

/// File name for a table: the section's first table is "<section>.csv",
/// others "<section>_<table>.csv".
inline std::string csv_name(const SectionSchema& s, const TableSchema& t) {
  return t.name == s.tables.front().name ? s.name + ".csv" : s.name + "_" + t.name + ".csv";
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + path.string());
  f << text;
  if (!f) throw ConfigError("failed writing " + path.string());
}

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw ConfigError("output directory " + dir.string() + " is not writable");
}

enum class ReportFormat { Json, Csv };

inline ReportFormat parse_format(std::string_view s) {
  if (s == "json") return ReportFormat::Json;
  if (s == "csv") return ReportFormat::Csv;
  throw ConfigError("unknown format '" + std::string(s) + "' (expected json or csv)");
}

/// Writes report.json, or one CSV file per table of every present section.
inline std::vector<std::filesystem::path> emit(const ReportDocument& r, ReportFormat fmt, const std::filesystem::path& dir) {
  ensure_dir(dir);
  std::vector<std::filesystem::path> written;
  if (fmt == ReportFormat::Json) {
    written.push_back(dir / "report.json");
    write_text(written.back(), to_json(r));
    return written;
  }
  for (const auto& s : report_schema()) {
    if (!r.doc["sections"].contains(s.name)) continue;
    for (const auto& t : s.tables) {
      written.push_back(dir / csv_name(s, t));
      write_text(written.back(), table_csv(r.doc["sections"][s.name][t.name], t));
    }
  }
  return written;
}

}  // namespace ep
