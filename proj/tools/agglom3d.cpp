// agglom3d command-line driver.
//
//   agglom3d <gen|fuse|train|eval|probe|cluster|hist|pipeline> --config FILE
//            [--out DIR] [--deterministic] [--seed U64] [command options]
//
// Exit status: 0 ok, 1 unexpected failure, 2 config/validation error,
// 3 I/O or file-format error, 4 contract error, 5 training collapse.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "agglom3d/agglom3d.hpp"

namespace fs = std::filesystem;
using namespace agglom3d;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kIo = 3, kContract = 4, kCollapse = 5 };

struct Common {
  std::string config;
  std::string out = ".";
  bool deterministic = false;
  std::optional<std::uint64_t> seed;
};

struct Options {
  Common common;
  std::string data;
  std::string checkpoint;
  bool ensemble = false;
  bool cross_domain = false;
};

// Collects written artifacts and their digests.
class Manifest {
 public:
  Manifest(std::string command, fs::path root) : command_(std::move(command)), root_(std::move(root)) {}

  void bytes(const fs::path& rel, std::span<const std::uint8_t> data) {
    io::ensure_dir((root_ / rel).parent_path());
    io::write_file(root_ / rel, data);
    entries_.push_back({{"path", rel.generic_string()}, {"digest", io::digest(data)}, {"bytes", data.size()}});
  }

  void text(const fs::path& rel, const std::string& s) {
    bytes(rel, {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
  }

  // Records an artifact written by someone else.
  void existing(const fs::path& rel) {
    const auto data = io::read_file(root_ / rel);
    entries_.push_back({{"path", rel.generic_string()}, {"digest", io::digest(data)}, {"bytes", data.size()}});
  }

  json finish(const RunConfig& c) const {
    json m{{"command", command_}, {"seed", c.seed}, {"artifacts", entries_}};
    const std::string s = m.dump(2) + "\n";
    io::write_text(root_ / ("manifest_" + command_ + ".json"), s);
    std::cout << s;
    return m;
  }

 private:
  std::string command_;
  fs::path root_;
  json entries_ = json::array();
};

RunConfig load(const Common& o) {
  if (o.config.empty()) throw ConfigError("--config is required");
  RunConfig c = load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  return c;
}

fs::path frame_name(int scan, int frame) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "frames/scan%02d_frame%02d.a3fr", scan, frame);
  return buf;
}

fs::path map_name(int scan, int frame, const std::string& teacher) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "maps/scan%02d_frame%02d_%s.a3fm", scan, frame, teacher.c_str());
  return buf;
}

fs::path bank_name(int scan) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "banks/scan%02d.a3fb", scan);
  return buf;
}

const fs::path kAllBank = "banks/all.a3fb";
const fs::path kScene = "scene.a3pc";

fs::path data_dir(const Options& o) { return o.data.empty() ? fs::path(o.common.out) : fs::path(o.data); }

std::vector<TrainingScene> load_training_scenes(const RunConfig& c, const fs::path& dir, PointCloud& layout) {
  layout = read_point_cloud(dir / kScene);
  std::vector<TrainingScene> scenes;
  for (int s = 0; s < c.scene.num_scans; ++s) {
    auto bank = read_bank(dir / bank_name(s));
    if (bank.num_teachers() != c.teachers.size()) throw ValidationError("bank teacher count differs from the config");
    for (std::size_t t = 0; t < c.teachers.size(); ++t) {
      if (bank.features[t].cols() != c.teachers[t].dim) {
        throw ValidationError("bank dim for teacher '" + c.teachers[t].name + "' differs from the config");
      }
    }
    scenes.push_back({layout, std::move(bank)});
  }
  return scenes;
}

StudentModel load_model(const RunConfig& c, const std::string& path) {
  if (path.empty()) throw ConfigError("--checkpoint is required");
  auto ck = read_checkpoint(path);
  if (ck.model.num_heads() != c.teachers.size()) throw ContractError("checkpoint heads do not match the configured teachers");
  return std::move(ck.model);
}

std::string metrics_text(const Metrics& m, const std::string& title) {
  std::ostringstream os;
  char line[160];
  os << title << "\n";
  std::snprintf(line, sizeof line, "%-6s %8s %8s\n", "class", "IoU", "Acc");
  os << line;
  for (std::size_t k = 0; k < m.per_class_iou.size(); ++k) {
    auto cell = [](const std::optional<double>& v) {
      char b[16];
      if (v) std::snprintf(b, sizeof b, "%8.4f", *v);
      else std::snprintf(b, sizeof b, "%8s", "-");
      return std::string(b);
    };
    std::snprintf(line, sizeof line, "%-6zu %s %s\n", k, cell(m.per_class_iou[k]).c_str(), cell(m.per_class_acc[k]).c_str());
    os << line;
  }
  std::snprintf(line, sizeof line, "%-6s %8.4f %8.4f\n", "mean", m.miou, m.macc);
  os << line;
  return os.str();
}

// --- commands --------------------------------------------------------------

int cmd_gen(const Options& o) {
  const RunConfig c = load(o.common);
  Manifest man("gen", o.common.out);
  const PointCloud layout = build_layout(c);
  man.bytes(kScene, encode_point_cloud(layout));
  for (int s = 0; s < c.scene.num_scans; ++s) {
    const auto frames = simulate_scan(layout, c, s);
    for (int f = 0; f < static_cast<int>(frames.size()); ++f) {
      man.bytes(frame_name(s, f), encode_frame(frames[static_cast<std::size_t>(f)].frame));
      for (std::size_t t = 0; t < c.teachers.size(); ++t) {
        man.bytes(map_name(s, f, c.teachers[t].name), encode_feature_map(frames[static_cast<std::size_t>(f)].maps[t]));
      }
    }
  }
  man.finish(c);
  return kOk;
}

int cmd_fuse(const Options& o) {
  const RunConfig c = load(o.common);
  const fs::path in = data_dir(o);
  const PointCloud layout = read_point_cloud(in / kScene);
  Manifest man("fuse", o.common.out);
  std::vector<FrameObservation> everything;
  for (int s = 0; s < c.scene.num_scans; ++s) {
    std::vector<FrameObservation> frames;
    for (int f = 0; f < c.scene.frames_per_scan; ++f) {
      FrameObservation obs;
      obs.frame = read_frame(in / frame_name(s, f));
      for (const auto& t : c.teachers) obs.maps.push_back(load_feature_map(in / map_name(s, f, t.name), t.dim));
      frames.push_back(std::move(obs));
    }
    man.bytes(bank_name(s), encode_bank(fuse_views(layout, frames, c.teachers, c.fusion.depth_tol)));
    everything.insert(everything.end(), std::make_move_iterator(frames.begin()), std::make_move_iterator(frames.end()));
  }
  man.bytes(kAllBank, encode_bank(fuse_views(layout, everything, c.teachers, c.fusion.depth_tol)));
  man.finish(c);
  return kOk;
}

int cmd_train(const Options& o) {
  const RunConfig c = load(o.common);
  PointCloud layout;
  const auto scenes = load_training_scenes(c, data_dir(o), layout);
  const fs::path out = o.common.out;
  io::ensure_dir(out / "checkpoints");
  auto result = train(scenes, c.teachers, make_student(c, c.teachers), c.train_config(), {out / "checkpoints"});
  Manifest man("train", out);
  for (const auto& e : result.log.epochs) {
    char name[48];
    std::snprintf(name, sizeof name, "checkpoints/epoch_%03d.a3ck", e.epoch);
    man.existing(name);
  }
  man.text("log.jsonl", log_to_jsonl(result.log));
  if (uses_sigma(c.objective)) man.text("sigma.csv", sigma_trajectory(result.log).to_csv());
  man.bytes("final.a3ck", encode_checkpoint(result.model, result.steps_taken));
  json summary{{"mode", std::string(to_string(c.objective))}, {"steps", result.steps_taken},
               {"epochs", result.log.epochs.size()}, {"final_scales", current_scales(result.model, c.objective)},
               {"status", result.log.collapse ? "collapse" : "ok"}};
  if (result.log.collapse) {
    summary["collapse"] = {{"step", result.log.collapse->step}, {"epoch", result.log.collapse->epoch},
                           {"reason", result.log.collapse->reason}};
  }
  man.text("train_summary.json", summary.dump(2) + "\n");
  man.finish(c);
  if (result.log.collapse) {
    std::cerr << "training collapsed at step " << result.log.collapse->step << ": " << result.log.collapse->reason << "\n";
    return kCollapse;
  }
  return kOk;
}

int cmd_eval(const Options& o) {
  const RunConfig c = load(o.common);
  const fs::path in = data_dir(o);
  const PointCloud layout = read_point_cloud(in / kScene);
  const StudentModel model = load_model(c, o.checkpoint);
  const auto vocab = vocabulary_from_teacher(c.teachers[text_aligned_head(c.teachers)], c.scene.num_classes);
  const bool ensemble = o.ensemble || c.eval.ensemble;
  std::vector<int> labels;
  if (ensemble) {
    labels = ensemble_2d3d(model, layout, read_bank(in / kAllBank), vocab, c.teachers);
  } else {
    labels = ov_segment(model, layout, vocab, c.teachers);
  }
  const Metrics m = compute_metrics(labels, *layout.labels, c.scene.num_classes);
  json out{{"method", ensemble ? "ensemble_2d3d" : "ov_segment"}, {"in_domain", metrics_to_json(m)}};
  std::string text = metrics_text(m, std::string(ensemble ? "ensemble_2d3d" : "ov_segment") + " (in-domain)");
  if (o.cross_domain) {
    const PointCloud b = build_layout(c, c.eval.domain_b_size_scale);
    const Metrics mb = cross_domain_eval(model, {b}, vocab, c.teachers);
    out["domain_b"] = metrics_to_json(mb);
    text += "\n" + metrics_text(mb, "ov_segment (domain B)");
  }
  Manifest man("eval", o.common.out);
  man.text("metrics.json", out.dump(2) + "\n");
  man.text("metrics.txt", text);
  std::cerr << text;
  man.finish(c);
  return kOk;
}

int cmd_probe(const Options& o) {
  const RunConfig c = load(o.common);
  const PointCloud layout = read_point_cloud(data_dir(o) / kScene);
  const StudentModel model = load_model(c, o.checkpoint);
  const auto order = sample_indices(layout.size(), layout.size(), derive_seed({tag("probe-split"), c.seed}));
  const auto n_train = static_cast<std::size_t>(c.eval.probe_train_fraction * static_cast<double>(layout.size()));
  if (n_train == 0 || n_train >= layout.size()) throw ConfigError("eval.probe_train_fraction leaves an empty split");
  const PointCloud train = layout.select({order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train)});
  const PointCloud eval = layout.select({order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end()});

  std::vector<std::pair<std::string, ProbeConfig>> rows{{"concat", c.eval.probe_config(ProbeMode::kConcat)},
                                                        {"average", c.eval.probe_config(ProbeMode::kAverage)}};
  for (std::size_t h = 0; h < c.teachers.size(); ++h) {
    rows.push_back({"single:" + c.teachers[h].name, c.eval.probe_config(ProbeMode::kSingle, h)});
  }
  json table = json::array();
  std::ostringstream text;
  char line[160];
  std::snprintf(line, sizeof line, "%-24s %8s %8s\n", "features", "mIoU", "mAcc");
  text << line;
  for (const auto& [name, cfg] : rows) {
    const Metrics m = linear_probe(model, train, eval, cfg);
    table.push_back({{"features", name}, {"miou", m.miou}, {"macc", m.macc}});
    std::snprintf(line, sizeof line, "%-24s %8.4f %8.4f\n", name.c_str(), m.miou, m.macc);
    text << line;
  }
  Manifest man("probe", o.common.out);
  man.text("probe.json", table.dump(2) + "\n");
  man.text("probe.txt", text.str());
  std::cerr << text.str();
  man.finish(c);
  return kOk;
}

int cmd_cluster(const Options& o) {
  const RunConfig c = load(o.common);
  const PointCloud layout = read_point_cloud(data_dir(o) / kScene);
  const StudentModel model = load_model(c, o.checkpoint);
  const Matrix x = probe_features(forward(model, layout), {ProbeMode::kConcat, 0, 0.0});
  const auto r = kmeans(x, c.eval.kmeans_k, derive_seed({tag("kmeans"), c.seed}), c.eval.kmeans_max_iters,
                        c.eval.kmeans_normalize);
  std::vector<std::size_t> sizes(static_cast<std::size_t>(c.eval.kmeans_k), 0);
  std::ostringstream csv;
  csv << "point,cluster,label\n";
  for (std::size_t i = 0; i < r.assignments.size(); ++i) {
    ++sizes[static_cast<std::size_t>(r.assignments[i])];
    csv << i << "," << r.assignments[i] << "," << (*layout.labels)[i] << "\n";
  }
  json out{{"k", c.eval.kmeans_k}, {"iterations", r.iterations}, {"inertia_history", r.inertia_history}, {"sizes", sizes}};
  std::ostringstream text;
  char line[96];
  std::snprintf(line, sizeof line, "%-8s %8s\n", "cluster", "points");
  text << line;
  for (std::size_t k = 0; k < sizes.size(); ++k) {
    std::snprintf(line, sizeof line, "%-8zu %8zu\n", k, sizes[k]);
    text << line;
  }
  Manifest man("cluster", o.common.out);
  man.text("cluster.json", out.dump(2) + "\n");
  man.text("assignments.csv", csv.str());
  man.bytes("assignments.a3as", encode_assignments(r.assignments));
  man.text("cluster.txt", text.str());
  std::cerr << text.str();
  man.finish(c);
  return kOk;
}

int cmd_hist(const Options& o) {
  const RunConfig c = load(o.common);
  const FusedFeatureBank bank = read_bank(data_dir(o) / kAllBank);
  if (bank.num_teachers() != c.teachers.size()) throw ValidationError("bank teacher count differs from the config");
  const HistogramSpec spec{c.eval.hist_lo, c.eval.hist_hi, c.eval.hist_bins};
  std::vector<std::size_t> observed;
  for (std::size_t i = 0; i < bank.mask.size(); ++i) {
    if (bank.mask[i]) observed.push_back(i);
  }
  json out = json::array();
  std::ostringstream csv, text;
  csv << "teacher,variant,bin_lo,bin_hi,count\n";
  char line[160];
  std::snprintf(line, sizeof line, "%-12s %-9s %10s %10s %10s %9s\n", "teacher", "variant", "values", "tail", "tail_frac",
                "kurtosis");
  text << line;
  const double width = (spec.hi - spec.lo) / spec.bins;
  for (std::size_t t = 0; t < c.teachers.size(); ++t) {
    Matrix rows(static_cast<Eigen::Index>(observed.size()), bank.features[t].cols());
    for (std::size_t r = 0; r < observed.size(); ++r) rows.row(static_cast<Eigen::Index>(r)) = bank.features[t].row(static_cast<Eigen::Index>(observed[r]));
    for (const auto& [variant, x] : {std::pair<std::string, Matrix>{"raw", rows}, {"de_mean", de_mean(rows)}}) {
      const Histogram h = feature_histogram(x, spec);
      std::vector<double> values(x.data(), x.data() + x.size());
      std::optional<double> kurt;
      try {
        kurt = sample_kurtosis(values);
      } catch (const ContractError&) {
      }
      out.push_back({{"teacher", c.teachers[t].name}, {"variant", variant}, {"counts", h.counts}, {"underflow", h.underflow},
                     {"overflow", h.overflow}, {"tail_mass", h.tail_mass()},
                     {"kurtosis", kurt ? json(*kurt) : json(nullptr)}});
      csv << c.teachers[t].name << "," << variant << ",-inf," << spec.lo << "," << h.underflow << "\n";
      for (std::size_t b = 0; b < h.counts.size(); ++b) {
        csv << c.teachers[t].name << "," << variant << "," << spec.lo + width * static_cast<double>(b) << ","
            << spec.lo + width * static_cast<double>(b + 1) << "," << h.counts[b] << "\n";
      }
      csv << c.teachers[t].name << "," << variant << "," << spec.hi << ",inf," << h.overflow << "\n";
      const double frac = h.total() ? static_cast<double>(h.tail_mass()) / static_cast<double>(h.total()) : 0.0;
      char kbuf[16];
      if (kurt) std::snprintf(kbuf, sizeof kbuf, "%9.3f", *kurt);
      else std::snprintf(kbuf, sizeof kbuf, "%9s", "-");
      std::snprintf(line, sizeof line, "%-12s %-9s %10llu %10llu %10.5f %s\n", c.teachers[t].name.c_str(), variant.c_str(),
                    static_cast<unsigned long long>(h.total()), static_cast<unsigned long long>(h.tail_mass()), frac, kbuf);
      text << line;
    }
  }
  Manifest man("hist", o.common.out);
  man.text("hist.json", out.dump(2) + "\n");
  man.text("hist.csv", csv.str());
  man.text("hist.txt", text.str());
  std::cerr << text.str();
  man.finish(c);
  return kOk;
}

int cmd_pipeline(const Options& o) {
  const RunConfig c = load(o.common);
  const auto report = run_pipeline(c, fs::path(o.common.out));
  std::cout << report_text(report.cells);
  return kOk;
}

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "JSON run configuration")->required();
  sub->add_option("--out", c.out, "output directory");
  sub->add_flag("--deterministic", c.deterministic, "serial, bit-reproducible execution");
  sub->add_option("--seed", c.seed, "override the root seed");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"agglom3d: multi-teacher distillation into 3D point features"};
  app.require_subcommand(1);
  Options o;
  struct Entry {
    const char* name;
    const char* help;
    int (*run)(const Options&);
  };
  const std::vector<Entry> commands{
      {"gen", "generate a scene, frames and teacher feature maps", cmd_gen},
      {"fuse", "fuse teacher maps into per-point feature banks", cmd_fuse},
      {"train", "train the student on fused banks", cmd_train},
      {"eval", "open-vocabulary segmentation metrics", cmd_eval},
      {"probe", "linear probes on student features", cmd_probe},
      {"cluster", "k-means on student features", cmd_cluster},
      {"hist", "feature-value histograms of the fused bank", cmd_hist},
      {"pipeline", "gen, fuse, train and eval for every configured cell", cmd_pipeline},
  };
  std::vector<CLI::App*> subs;
  for (const auto& e : commands) {
    auto* sub = app.add_subcommand(e.name, e.help);
    add_common(sub, o.common);
    subs.push_back(sub);
  }
  for (auto* sub : subs) {
    const std::string n = sub->get_name();
    if (n == "fuse" || n == "train" || n == "eval" || n == "probe" || n == "cluster" || n == "hist") {
      sub->add_option("--data", o.data, "directory written by gen/fuse (default: --out)");
    }
    if (n == "eval" || n == "probe" || n == "cluster") sub->add_option("--checkpoint", o.checkpoint, "student checkpoint");
    if (n == "eval") {
      sub->add_flag("--ensemble", o.ensemble, "label with the 2D/3D ensemble");
      sub->add_flag("--cross-domain", o.cross_domain, "also evaluate on the resized domain-B layout");
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }
  try {
    io::ensure_dir(o.common.out);
    for (std::size_t i = 0; i < subs.size(); ++i) {
      if (subs[i]->parsed()) return commands[i].run(o);
    }
    return kOther;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kConfig;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kIo;
  } catch (const ContractError& e) {
    std::cerr << "contract error: " << e.what() << "\n";
    return kContract;
  } catch (const CapacityError& e) {
    std::cerr << "capacity error: " << e.what() << "\n";
    return kContract;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
}
