#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "voxseg/voxseg.hpp"

namespace voxseg {

namespace fs = std::filesystem;

namespace {

const std::set<std::string> kPathOptions = {"in",  "out",  "data",    "ckpt", "spec",
                                            "log", "grid", "out-dir", "features"};

std::string fmt_double(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string join(const std::vector<std::string>& parts, char sep = ',') {
  std::string s;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) s += sep;
    s += parts[i];
  }
  return s;
}

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << text;
  if (!f) throw std::runtime_error("failed writing " + path);
}

void ensure_parent(const std::string& path) {
  auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

// Prints every option of the selected command, given or defaulted.
void print_config(std::ostream& out, const CLI::App& app, const CLI::App& sub) {
  out << "CONFIG.command=" << sub.get_name() << "\n";
  auto emit = [&](const CLI::Option* opt) {
    const auto& name = opt->get_single_name();
    if (name.empty() || name == "help") return;
    std::string value;
    if (opt->get_expected_min() == 0) {
      value = opt->count() > 0 ? "true" : "false";
    } else if (opt->count() > 0) {
      value = join(opt->results());
    } else {
      value = opt->get_default_str();
    }
    if (kPathOptions.count(name) && !value.empty()) {
      value = fs::weakly_canonical(fs::absolute(value)).string();
    }
    out << "CONFIG." << name << "=" << value << "\n";
  };
  for (const auto* opt : app.get_options()) emit(opt);
  for (const auto* opt : sub.get_options()) emit(opt);
}

LabeledPointCloud load_normalized(const std::string& path) {
  return normalize_cloud(read_point_cloud(path));
}

std::vector<LabeledPointCloud> select_split(Dataset& data, const std::string& split) {
  if (split == "train") return data.train;
  if (split == "test") return data.test;
  if (split == "all") {
    auto all = data.train;
    all.insert(all.end(), data.test.begin(), data.test.end());
    return all;
  }
  throw std::invalid_argument("unknown split '" + split + "' (expected train, test or all)");
}

template <typename T>
Model<T> load_model(const std::string& path) {
  auto ckpt = load_checkpoint<T>(path);
  return std::move(ckpt.model);
}

// Voxelizes at the model resolution and attaches the predicted labels.
template <typename T>
VoxelGrid predict_grid(Model<T>& model, const LabeledPointCloud& cloud) {
  VoxelGrid grid = voxelize(cloud, model.spec().resolution);
  auto seg = forward_segment(model, grid);
  grid.labels = std::move(seg.labels);
  return grid;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string category = "chair";
  std::size_t train = 20;
  std::size_t test = 5;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_gen_data(const GenDataArgs& a, std::ostream& out) {
  auto manifest = make_dataset(a.category, a.train, a.test, a.seed, a.out);
  out << "Generated " << manifest.train.size() << " training and " << manifest.test.size()
      << " test " << manifest.category << " shapes in " << a.out << "\n";
  out << "TRAIN=" << manifest.train.size() << "\nTEST=" << manifest.test.size() << "\n";
  return 0;
}

struct VoxelizeArgs {
  std::string in;
  int res = 48;
  std::string out;
};

int cmd_voxelize(const VoxelizeArgs& a, std::ostream& out) {
  auto cloud = load_normalized(a.in);
  auto grid = voxelize(cloud, a.res);
  ensure_parent(a.out);
  write_volume(a.out, grid);
  out << "POINTS=" << cloud.size() << "\nOCCUPIED=" << grid.occupied_count() << "\n";
  return 0;
}

struct DilationArgs {
  std::vector<int> rates;
  int kernel = 3;
};

int cmd_validate_dilations(const DilationArgs& a, std::ostream& out) {
  auto sched = validate_schedule(a.rates, a.kernel);
  auto support = support_coverage(a.rates, a.kernel);
  out << "Rates " << join_ints(sched.rates) << " with kernel " << sched.kernel << ": "
      << (sched.feasible ? "feasible" : "infeasible") << "\n";
  out << "FEASIBLE=" << (sched.feasible ? "true" : "false") << " M=" << join_ints(sched.m) << "\n";
  out << "REASON=" << sched.reason << "\n";
  out << "COVERED=" << (support.fully_covered ? "true" : "false") << "\n";
  out << "EXTENT=" << support.extent << "\n";
  return 0;
}

int cmd_rf(const std::string& spec_path, std::ostream& out) {
  auto spec = ArchitectureSpec::load(spec_path);
  auto path = receptive_field_path(spec);
  out << variant_name(spec.variant) << ": " << path.size() << " spatial layers\n";
  out << "RF=" << receptive_field(spec) << "\n";
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string arch;
  std::string out;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  bool augment = false;
  bool expand_rotations = false;
  std::size_t batch = 4;
  double lr = 1e-3;
  std::string log;
  std::size_t checkpoint_every = 0;
  std::string precision = "float";
};

template <typename T>
int train_impl(const TrainArgs& a, std::ostream& out) {
  auto spec = ArchitectureSpec::load(a.arch);
  auto data = load_dataset(a.data);
  const auto& cat = find_category(data.manifest.category);
  if (spec.labels != cat.part_count()) {
    throw std::invalid_argument("architecture has " + std::to_string(spec.labels) +
                                " labels but category '" + cat.name + "' has " +
                                std::to_string(cat.part_count()) + " parts");
  }
  std::vector<LabeledPointCloud> shapes;
  shapes.reserve(data.train.size());
  for (const auto& c : data.train) shapes.push_back(normalize_cloud(c));

  TrainConfig cfg;
  cfg.adam.learning_rate = a.lr;
  cfg.batch_size = a.batch;
  cfg.epochs = a.epochs;
  cfg.augment = a.augment;
  cfg.expand_rotations = a.expand_rotations;
  cfg.seed = a.seed;
  cfg.validate();

  std::ostringstream canon;
  canon << spec.to_json() << "|category=" << cat.name << "|train=" << join(data.manifest.train)
        << "|epochs=" << a.epochs << "|seed=" << a.seed << "|batch=" << a.batch
        << "|lr=" << fmt_double(a.lr, 10) << "|augment=" << a.augment
        << "|expand=" << a.expand_rotations << "|precision=" << a.precision;
  const std::string hash = fnv1a_hex(canon.str());
  out << "CONFIG_HASH=" << hash << "\n";

  Model<T> model(spec, a.seed);
  out << "PARAMETERS=" << model.parameter_count() << "\n";
  Trainer<T> trainer(model, std::move(shapes), cfg);

  const std::string log_path = a.log.empty() ? a.out + ".log.csv" : a.log;
  ensure_parent(log_path);
  ensure_parent(a.out);
  std::ofstream log(log_path, std::ios::binary);
  if (!log) throw std::runtime_error("cannot open " + log_path + " for writing");
  log << "epoch,loss,voxel_acc\n";

  trainer.run([&](const EpochStats& s) {
    log << s.epoch << "," << fmt_double(s.loss, 6) << "," << fmt_double(s.voxel_accuracy, 6)
        << "\n";
    log.flush();
    out << "EPOCH=" << s.epoch << " LOSS=" << fmt_double(s.loss, 6)
        << " VOXEL_ACC=" << fmt_double(s.voxel_accuracy, 6) << "\n";
    if (a.checkpoint_every > 0 && s.epoch % a.checkpoint_every == 0 && s.epoch < a.epochs) {
      save_checkpoint(a.out, model, &trainer.optimizer(), hash);
    }
  });
  save_checkpoint(a.out, model, &trainer.optimizer(), hash);
  out << "CHECKPOINT=" << a.out << "\nLOG=" << log_path << "\n";
  return 0;
}

struct EvalArgs {
  std::string ckpt;
  std::string data;
  int res = 0;
  std::string out;
  std::string split = "test";
  bool strict = false;
  std::string precision = "float";
};

template <typename T>
int eval_impl(const EvalArgs& a, std::ostream& out) {
  auto model = load_model<T>(a.ckpt);
  if (a.res != 0 && a.res != model.spec().resolution) {
    throw std::invalid_argument("checkpoint resolution " +
                                std::to_string(model.spec().resolution) +
                                " does not match --res " + std::to_string(a.res));
  }
  auto data = load_dataset(a.data);
  const auto& cat = find_category(data.manifest.category);
  auto clouds = select_split(data, a.split);
  if (clouds.empty()) throw std::invalid_argument("split '" + a.split + "' has no shapes");

  std::vector<ShapeEval> evals;
  for (const auto& raw : clouds) {
    auto cloud = normalize_cloud(raw);
    auto grid = predict_grid(model, cloud);
    auto pred = project_labels_to_points(grid, cloud);
    evals.push_back(
        evaluate_shape(cat.name, cloud.shape_id, pred, cloud.labels, cat.part_count(), a.strict));
  }
  auto report = aggregate(evals, a.strict);
  write_text(a.out, report_csv(report));
  for (const auto& c : report.categories) {
    out << "CATEGORY=" << c.category << " COUNT=" << c.count << " MIOU=" << fmt_double(c.miou, 4)
        << "\n";
  }
  out << "SHAPES=" << report.shape_count << "\n";
  out << "OVERALL_MIOU=" << fmt_double(report.overall_iou, 4) << "\n";
  if (report.overall_precision) {
    out << "OVERALL_PRECISION=" << fmt_double(*report.overall_precision, 4) << "\n";
    out << "OVERALL_RECALL=" << fmt_double(*report.overall_recall, 4) << "\n";
  }
  return 0;
}

struct SegmentArgs {
  std::string ckpt;
  std::string in;
  std::string out;
  std::string grid;
  std::string precision = "float";
};

template <typename T>
int segment_impl(const SegmentArgs& a, std::ostream& out) {
  auto model = load_model<T>(a.ckpt);
  auto cloud = load_normalized(a.in);
  auto grid = predict_grid(model, cloud);
  auto labels = project_labels_to_points(grid, cloud);
  LabeledPointCloud result = cloud;
  result.labels = labels;
  ensure_parent(a.out);
  write_point_cloud(a.out, result);
  if (!a.grid.empty()) {
    ensure_parent(a.grid);
    write_volume(a.grid, grid);
  }
  out << "POINTS=" << cloud.size() << "\nOCCUPIED=" << grid.occupied_count() << "\n";
  return 0;
}

struct ActivationArgs {
  std::string ckpt;
  std::string in;
  std::string stage;
  std::string out_dir;
  std::string precision = "float";
};

template <typename T>
int activations_impl(const ActivationArgs& a, std::ostream& out) {
  auto model = load_model<T>(a.ckpt);
  auto cloud = load_normalized(a.in);
  auto grid = voxelize(cloud, model.spec().resolution);
  auto maps = export_activations(model, grid, a.stage);
  fs::create_directories(a.out_dir);
  VoxelGrid occupancy_only = grid;
  occupancy_only.labels.clear();
  for (std::size_t c = 0; c < maps.size(); ++c) {
    char name[32];
    std::snprintf(name, sizeof name, "_c%03zu.vsgv", c);
    write_volume((fs::path(a.out_dir) / (a.stage + name)).string(), occupancy_only, maps[c]);
  }
  out << "STAGE=" << a.stage << "\nCHANNELS=" << maps.size() << "\n";
  return 0;
}

struct FeaturesArgs {
  std::string ckpt;
  std::string data;
  std::string out;
  std::string split = "all";
  std::string precision = "float";
};

template <typename T>
int features_impl(const FeaturesArgs& a, std::ostream& out) {
  auto model = load_model<T>(a.ckpt);
  auto data = load_dataset(a.data);
  auto clouds = select_split(data, a.split);
  std::vector<PartFeature> feats;
  for (const auto& raw : clouds) {
    auto cloud = normalize_cloud(raw);
    auto grid = voxelize(cloud, model.spec().resolution);
    auto f = extract_part_feature(model, grid);
    f.category = cloud.category;
    f.shape_id = cloud.shape_id;
    feats.push_back(std::move(f));
  }
  write_text(a.out, features_csv(feats));
  out << "SHAPES=" << feats.size() << "\n";
  out << "DIM=" << (feats.empty() ? 0 : feats.front().values.size()) << "\n";
  return 0;
}

struct ClusterArgs {
  std::string features;
  std::size_t k = 2;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_cluster(const ClusterArgs& a, std::ostream& out) {
  auto rows = read_features_csv(a.features);
  std::vector<std::vector<double>> values;
  values.reserve(rows.size());
  for (const auto& r : rows) values.push_back(r.values);
  auto result = kmeans(values, a.k, a.seed);

  std::ostringstream csv;
  csv << "shape_id,cluster\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    csv << rows[i].shape_id << "," << result.assignments[i] << "\n";
  }
  if (!a.out.empty()) write_text(a.out, csv.str());

  std::vector<std::string> sizes;
  for (std::size_t c = 0; c < a.k; ++c) {
    sizes.push_back(std::to_string(
        std::count(result.assignments.begin(), result.assignments.end(), c)));
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out << "ASSIGN " << rows[i].shape_id << " " << result.assignments[i] << "\n";
  }
  out << "CLUSTER_SIZES=" << join(sizes) << "\n";
  out << "ITERATIONS=" << result.iterations << "\n";
  out << "CONVERGED=" << (result.converged ? "true" : "false") << "\n";
  out << "OBJECTIVE=" << fmt_double(result.objective.empty() ? 0.0 : result.objective.back()) << "\n";
  return 0;
}

struct UpperBoundArgs {
  std::string in;
  std::vector<int> res;
  std::string out;
};

int cmd_upper_bound(const UpperBoundArgs& a, std::ostream& out) {
  std::vector<LabeledPointCloud> clouds;
  int part_count = 0;
  if (fs::exists(fs::path(a.in) / "manifest.json")) {
    auto data = load_dataset(a.in);
    clouds = select_split(data, "all");
    part_count = find_category(data.manifest.category).part_count();
  } else {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(a.in)) {
      if (e.is_regular_file() && e.path().extension() == ".txt") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      clouds.push_back(read_point_cloud(f.string()));
      for (int l : clouds.back().labels) part_count = std::max(part_count, l);
    }
  }
  if (clouds.empty()) throw std::invalid_argument("no point clouds found in " + a.in);
  for (auto& c : clouds) c = normalize_cloud(c);

  std::ostringstream csv;
  csv << "resolution,mean_iou,shapes\n";
  for (int r : a.res) {
    double total = 0;
    for (const auto& c : clouds) total += quantization_upper_bound(c, r, part_count);
    double mean = total / static_cast<double>(clouds.size());
    csv << r << "," << fmt_double(mean, 4) << "," << clouds.size() << "\n";
    out << "RES=" << r << " UPPER_BOUND=" << fmt_double(mean, 4) << "\n";
  }
  write_text(a.out, csv.str());
  return 0;
}

template <template <typename> class Fn, typename Args>
int dispatch_precision(const std::string& precision, const Args& args, std::ostream& out) {
  if (precision == "float") return Fn<float>::run(args, out);
  if (precision == "double") return Fn<double>::run(args, out);
  throw std::invalid_argument("unknown precision '" + precision + "'");
}

template <typename T>
struct TrainFn {
  static int run(const TrainArgs& a, std::ostream& o) { return train_impl<T>(a, o); }
};
template <typename T>
struct EvalFn {
  static int run(const EvalArgs& a, std::ostream& o) { return eval_impl<T>(a, o); }
};
template <typename T>
struct SegmentFn {
  static int run(const SegmentArgs& a, std::ostream& o) { return segment_impl<T>(a, o); }
};
template <typename T>
struct ActivationFn {
  static int run(const ActivationArgs& a, std::ostream& o) { return activations_impl<T>(a, o); }
};
template <typename T>
struct FeaturesFn {
  static int run(const FeaturesArgs& a, std::ostream& o) { return features_impl<T>(a, o); }
};

void add_precision(CLI::App* sub, std::string& target) {
  sub->add_option("--precision", target, "Arithmetic precision")
      ->check(CLI::IsMember({"float", "double"}))
      ->capture_default_str();
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Volumetric part segmentation toolkit", "voxseg"};
  app.require_subcommand(1);
  app.fallthrough(false);

  int threads = 1;
  app.add_option("--threads", threads, "Worker threads for matrix kernels")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic labeled dataset");
  gen_cmd->add_option("--category", gen.category, "table, chair or lamp")->capture_default_str();
  gen_cmd->add_option("--train", gen.train, "Training shapes")->capture_default_str();
  gen_cmd->add_option("--test", gen.test, "Test shapes")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Random seed")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();

  VoxelizeArgs vox;
  auto* vox_cmd = app.add_subcommand("voxelize", "Voxelize a labeled point cloud");
  vox_cmd->add_option("--in", vox.in, "Point cloud text file")->required();
  vox_cmd->add_option("--res", vox.res, "Grid resolution")->capture_default_str();
  vox_cmd->add_option("--out", vox.out, "Output volume (.vsgv)")->required();

  DilationArgs dil;
  auto* dil_cmd = app.add_subcommand("validate-dilations", "Check a dilation-rate schedule");
  dil_cmd->add_option("--rates", dil.rates, "Comma-separated rates")
      ->required()
      ->delimiter(',');
  dil_cmd->add_option("--kernel", dil.kernel, "Kernel size")->capture_default_str();

  std::string rf_spec;
  auto* rf_cmd = app.add_subcommand("rf", "Receptive field of an architecture");
  rf_cmd->add_option("--spec", rf_spec, "Architecture JSON")->required();

  TrainArgs tr;
  auto* tr_cmd = app.add_subcommand("train", "Train a segmentation model");
  tr_cmd->add_option("--data", tr.data, "Dataset directory")->required();
  tr_cmd->add_option("--arch", tr.arch, "Architecture JSON")->required();
  tr_cmd->add_option("--out", tr.out, "Checkpoint path (.vsgc)")->required();
  tr_cmd->add_option("--epochs", tr.epochs, "Epochs")->capture_default_str();
  tr_cmd->add_option("--seed", tr.seed, "Random seed")->capture_default_str();
  tr_cmd->add_flag("--augment", tr.augment, "Random upright rotation per sample");
  tr_cmd->add_flag("--expand-rotations", tr.expand_rotations, "Train on all 12 rotations");
  tr_cmd->add_option("--batch", tr.batch, "Batch size")->capture_default_str();
  tr_cmd->add_option("--lr", tr.lr, "Learning rate")->capture_default_str();
  tr_cmd->add_option("--log", tr.log, "Per-epoch CSV log (default <out>.log.csv)");
  tr_cmd->add_option("--checkpoint-every", tr.checkpoint_every, "Save every N epochs")
      ->capture_default_str();
  add_precision(tr_cmd, tr.precision);

  EvalArgs ev;
  auto* ev_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  ev_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  ev_cmd->add_option("--data", ev.data, "Dataset directory")->required();
  ev_cmd->add_option("--res", ev.res, "Expected resolution (0: checkpoint's)")
      ->capture_default_str();
  ev_cmd->add_option("--out", ev.out, "Report CSV")->required();
  ev_cmd->add_option("--split", ev.split, "train, test or all")
      ->check(CLI::IsMember({"train", "test", "all"}))
      ->capture_default_str();
  ev_cmd->add_flag("--strict-iou", ev.strict, "Leave parts absent from both sides out");
  add_precision(ev_cmd, ev.precision);

  SegmentArgs sg;
  auto* sg_cmd = app.add_subcommand("segment", "Segment one point cloud");
  sg_cmd->add_option("--ckpt", sg.ckpt, "Checkpoint")->required();
  sg_cmd->add_option("--in", sg.in, "Point cloud text file")->required();
  sg_cmd->add_option("--out", sg.out, "Labeled point cloud output")->required();
  sg_cmd->add_option("--grid", sg.grid, "Also write the labeled volume");
  add_precision(sg_cmd, sg.precision);

  ActivationArgs ac;
  auto* ac_cmd = app.add_subcommand("activations", "Export one stage's feature maps");
  ac_cmd->add_option("--ckpt", ac.ckpt, "Checkpoint")->required();
  ac_cmd->add_option("--in", ac.in, "Point cloud text file")->required();
  ac_cmd->add_option("--stage", ac.stage, "Stage name")->required();
  ac_cmd->add_option("--out-dir", ac.out_dir, "Output directory")->required();
  add_precision(ac_cmd, ac.precision);

  FeaturesArgs fe;
  auto* fe_cmd = app.add_subcommand("features", "Export part-based shape features");
  fe_cmd->add_option("--ckpt", fe.ckpt, "Checkpoint")->required();
  fe_cmd->add_option("--data", fe.data, "Dataset directory")->required();
  fe_cmd->add_option("--out", fe.out, "Feature CSV")->required();
  fe_cmd->add_option("--split", fe.split, "train, test or all")
      ->check(CLI::IsMember({"train", "test", "all"}))
      ->capture_default_str();
  add_precision(fe_cmd, fe.precision);

  ClusterArgs cl;
  auto* cl_cmd = app.add_subcommand("cluster", "k-means over exported features");
  cl_cmd->add_option("--features", cl.features, "Feature CSV")->required();
  cl_cmd->add_option("--k", cl.k, "Cluster count")->capture_default_str();
  cl_cmd->add_option("--seed", cl.seed, "Random seed")->capture_default_str();
  cl_cmd->add_option("--out", cl.out, "Assignment CSV");

  UpperBoundArgs ub;
  auto* ub_cmd = app.add_subcommand("upper-bound", "Voxelization upper bound per resolution");
  ub_cmd->add_option("--in", ub.in, "Directory of point clouds")->required();
  ub_cmd->add_option("--res", ub.res, "Comma-separated resolutions")
      ->required()
      ->delimiter(',');
  ub_cmd->add_option("--out", ub.out, "Output CSV")->required();

  if (argc <= 1) {
    err << app.help();
    return 2;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    if (app.get_subcommands().empty()) {
      err << "ERROR: " << e.what() << "\n" << app.help();
      return 2;
    }
    err << "ERROR: " << e.what() << "\n";
    return 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  print_config(out, app, *sub);
  set_num_threads(threads);

  try {
    const std::string name = sub->get_name();
    if (name == "gen-data") return cmd_gen_data(gen, out);
    if (name == "voxelize") return cmd_voxelize(vox, out);
    if (name == "validate-dilations") return cmd_validate_dilations(dil, out);
    if (name == "rf") return cmd_rf(rf_spec, out);
    if (name == "train") return dispatch_precision<TrainFn>(tr.precision, tr, out);
    if (name == "eval") return dispatch_precision<EvalFn>(ev.precision, ev, out);
    if (name == "segment") return dispatch_precision<SegmentFn>(sg.precision, sg, out);
    if (name == "activations") return dispatch_precision<ActivationFn>(ac.precision, ac, out);
    if (name == "features") return dispatch_precision<FeaturesFn>(fe.precision, fe, out);
    if (name == "cluster") return cmd_cluster(cl, out);
    if (name == "upper-bound") return cmd_upper_bound(ub, out);
    err << app.help();
    return 2;
  } catch (const std::exception& e) {
    out.flush();
    err << "ERROR: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace voxseg
