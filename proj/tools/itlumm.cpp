// itlumm command line: train a classifier, then run the replacement experiments.
#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <iterator>
#include <iostream>
#include <string>
#include <vector>

#include "itlumm/data_io.hpp"
#include "itlumm/errors.hpp"
#include "itlumm/experiments.hpp"
#include "itlumm/nn.hpp"

namespace fs = std::filesystem;
using namespace itlumm;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;

struct DataFlags {
  std::string dataset = "mnist";
  std::string data_dir;
  std::size_t train_limit = 0;
  std::size_t eval_limit = 0;
};

void add_data_flags(CLI::App* app, DataFlags& f) {
  app->add_option("--dataset", f.dataset, "mnist or cifar10")->check(CLI::IsMember({"mnist", "cifar10"}));
  app->add_option("--data-dir", f.data_dir, "dataset root (default $ITLUMM_DATA_DIR, then ./data)");
  app->add_option("--train-limit", f.train_limit, "use only the first N training rows (0 = all)");
  app->add_option("--eval-limit", f.eval_limit, "use only the first N test rows (0 = all)");
}

fs::path data_root(const DataFlags& f) {
  if (!f.data_dir.empty()) return f.data_dir;
  if (const char* env = std::getenv("ITLUMM_DATA_DIR"); env && *env) return env;
  return "data";
}

// root/<name> when it exists, else root itself
fs::path dataset_dir(const fs::path& root, const char* name) {
  const fs::path sub = root / name;
  return fs::is_directory(sub) ? sub : root;
}

std::vector<unsigned char> read_raw(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw FormatError("cannot open " + file.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string sha256_hex(const fs::path& file) {
  const auto bytes = read_raw(file);
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr))
    throw Error("sha256 failed for " + file.string());
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

// Checks every file listed in dir/SHA256SUMS (sha256sum format), if present.
void verify_checksums(const fs::path& dir) {
  const fs::path sums = dir / "SHA256SUMS";
  if (!fs::exists(sums)) return;
  std::ifstream in(sums);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string want, name;
    ls >> want >> name;
    if (!name.empty() && name[0] == '*') name.erase(0, 1);
    if (want.size() != 64 || name.empty()) throw FormatError(sums.string() + ": malformed line '" + line + "'");
    const fs::path file = dir / name;
    if (!fs::exists(file)) continue;  // e.g. only the .gz or only the raw variant is on disk
    const std::string got = sha256_hex(file);
    if (got != want) throw FormatError("checksum mismatch for " + file.string() + ": expected " + want + ", got " + got);
  }
}

LabeledDataset load_split(const DataFlags& f, bool train) {
  const fs::path root = data_root(f);
  LabeledDataset ds;
  if (f.dataset == "mnist") {
    const fs::path dir = dataset_dir(root, "mnist");
    verify_checksums(dir);
    ds = load_mnist_split(dir, train);
  } else {
    const fs::path dir = dataset_dir(root, "cifar-10-batches-bin");
    verify_checksums(dir);
    std::vector<fs::path> files;
    if (train)
      for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    else
      files.push_back(dir / "test_batch.bin");
    ds = load_cifar10(files);
  }
  const std::size_t limit = train ? f.train_limit : f.eval_limit;
  return limit && limit < ds.size() ? ds.head(limit) : ds;
}

std::vector<std::size_t> parse_sizes(const std::string& csv, const char* what) {
  std::vector<std::size_t> out;
  std::size_t pos = 0;
  while (pos <= csv.size()) {
    const std::size_t end = std::min(csv.find(',', pos), csv.size());
    const std::string tok = csv.substr(pos, end - pos);
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (tok.empty() || used != tok.size() || tok[0] == '-' || v == 0)
      throw ArgumentError(std::string(what) + ": '" + tok + "' is not a positive integer");
    out.push_back(static_cast<std::size_t>(v));
    pos = end + 1;
  }
  return out;
}

std::vector<std::string> split_names(const std::string& csv) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= csv.size()) {
    const std::size_t end = std::min(csv.find(',', pos), csv.size());
    out.push_back(csv.substr(pos, end - pos));
    pos = end + 1;
  }
  return out;
}

struct ExperimentFlags {
  DataFlags data;
  std::string model_path;
  std::string codebooks = "1,2,4,8,16";
  std::string partition = "naive";
  std::string objective = "kld";
  std::string method = "itlumm";
  std::string encoder = "tree";
  std::optional<double> lambda;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  double mac_lac_ratio = 1.0;
  bool quantize = false;
  std::string csv_path;
};

void add_experiment_flags(CLI::App* app, ExperimentFlags& f) {
  add_data_flags(app, f.data);
  app->add_option("--model", f.model_path, "trained model archive")->required();
  app->add_option("--codebooks,-c", f.codebooks, "comma separated C values")->capture_default_str();
  app->add_option("--seed", f.seed, "seed for encoders and fine-tuning")->capture_default_str();
  app->add_option("--jobs,-j", f.jobs, "parallel experiment cells")->capture_default_str();
  app->add_option("--mac-lac-ratio", f.mac_lac_ratio, "cost(MAC) / cost(LAC) for the cost model")->capture_default_str();
  app->add_option("--lambda", f.lambda, "ridge regularizer (default from the fit config)");
  app->add_option("--encoder", f.encoder, "tree or pq")->check(CLI::IsMember({"tree", "pq"}))->capture_default_str();
  app->add_flag("--quantize", f.quantize, "evaluate with 8-bit tables");
  app->add_option("--csv", f.csv_path, "write CSV here plus a .json run record next to it");
}

ExperimentConfig experiment_config(const ExperimentFlags& f) {
  ExperimentConfig cfg;
  cfg.codebooks = parse_sizes(f.codebooks, "--codebooks");
  cfg.amm.partition = parse_partition_kind(f.partition);
  cfg.amm.fit.objective = parse_objective(f.objective);
  cfg.amm.method = parse_lut_method(f.method);
  cfg.amm.encoder = f.encoder == "pq" ? EncoderKind::pq : EncoderKind::hash_tree;
  if (f.lambda) {
    if (!(*f.lambda >= 0.0)) throw ArgumentError("--lambda must be non-negative");
    cfg.amm.fit.lambda = *f.lambda;
  }
  cfg.amm.quantize = f.quantize;
  cfg.seed = f.seed;
  cfg.finetune = default_finetune_config(f.seed);
  cfg.jobs = f.jobs;
  if (!(f.mac_lac_ratio > 0.0)) throw ArgumentError("--mac-lac-ratio must be positive");
  cfg.mac_lac_ratio = f.mac_lac_ratio;
  return cfg;
}

void print_table(const std::vector<ExperimentRow>& rows) {
  std::printf("%-24s %5s %4s %-9s %-11s %8s %8s %8s %9s\n", "experiment", "layer", "C", "partition", "objective",
              "accuracy", "relative", "ratio", "breakeven");
  for (const auto& r : rows) {
    std::printf("%-24s %5s %4zu %-9s %-11s %8.4f %8.4f %8.4f %9.3f\n", r.experiment.c_str(), r.layer.c_str(),
                r.codebooks, r.partition.c_str(), r.objective.c_str(), r.accuracy, r.relative_accuracy, r.ratio,
                r.breakeven_c);
  }
}

nlohmann::json flag_record(const CLI::App* sub) {
  nlohmann::json flags = nlohmann::json::object();
  for (const CLI::Option* opt : sub->get_options()) {
    if (opt->get_name() == "--help") continue;
    const auto& res = opt->results();
    std::string value;
    if (!res.empty()) {
      for (std::size_t i = 0; i < res.size(); ++i) value += (i ? "," : "") + res[i];
    } else {
      value = opt->get_default_str();
    }
    flags[opt->get_name()] = value;
  }
  return flags;
}

void write_outputs(const std::vector<ExperimentRow>& rows, const std::string& csv_path, const CLI::App* sub,
                   std::uint64_t seed, int argc, char** argv) {
  print_table(rows);
  if (csv_path.empty()) return;
  std::ofstream out(csv_path);
  if (!out) throw FormatError("cannot write " + csv_path);
  write_csv(out, rows);
  nlohmann::json rec;
  rec["command"] = sub->get_name();
  rec["seed"] = seed;
  rec["version"] = version_string();
  rec["flags"] = flag_record(sub);
  rec["argv"] = std::vector<std::string>(argv, argv + argc);
  std::ofstream side(csv_path + ".json");
  if (!side) throw FormatError("cannot write " + csv_path + ".json");
  side << rec.dump(2) << '\n';
  std::printf("wrote %s (%zu rows)\n", csv_path.c_str(), rows.size());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lookup-table approximate matrix multiplication for MLP layers"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version_string());

  // train
  DataFlags train_data;
  std::string arch = "784,30,30,30,10", out_path;
  TrainConfig tcfg;
  auto* train_cmd = app.add_subcommand("train", "train an exact MLP and write a model archive");
  add_data_flags(train_cmd, train_data);
  train_cmd->add_option("--arch", arch, "layer widths, input first")->capture_default_str();
  train_cmd->add_option("--seed", tcfg.seed, "initialization and shuffling seed")->capture_default_str();
  train_cmd->add_option("--epochs", tcfg.epochs)->capture_default_str();
  train_cmd->add_option("--batch-size", tcfg.batch_size)->capture_default_str();
  train_cmd->add_option("--lr", tcfg.learn_rate)->capture_default_str();
  train_cmd->add_option("--momentum", tcfg.momentum)->capture_default_str();
  train_cmd->add_option("--out,-o", out_path, "model archive to write")->required();

  // experiments
  ExperimentFlags abl, rep, cmp;
  bool no_finetune = false, both = false;
  std::string variants = "maddness,itlumm-mse,itlumm-kld", partitions = "naive,opq,r2";
  auto* ablate_cmd = app.add_subcommand("ablate", "replace each layer alone, for every C");
  add_experiment_flags(ablate_cmd, abl);
  auto* replace_cmd = app.add_subcommand("replace-all", "incremental replacement of every layer, for every C");
  add_experiment_flags(replace_cmd, rep);
  auto* nf = replace_cmd->add_flag("--no-finetune", no_finetune, "skip suffix fine-tuning between steps");
  replace_cmd->add_flag("--both", both, "run with and without fine-tuning")->excludes(nf);
  auto* compare_cmd = app.add_subcommand("compare", "LUT fitting variants on the classifier layer");
  add_experiment_flags(compare_cmd, cmp);
  compare_cmd->add_option("--variants", variants, "maddness, itlumm-mse, itlumm-kld")->capture_default_str();
  compare_cmd->add_option("--partitions", partitions, "naive, opq, r2")->capture_default_str();
  for (auto* sub : {ablate_cmd, replace_cmd}) {
    ExperimentFlags& f = sub == ablate_cmd ? abl : rep;
    sub->add_option("--partition", f.partition, "naive, opq or r2")->capture_default_str();
    sub->add_option("--objective", f.objective, "mse or kld (kld applies to softmax layers)")->capture_default_str();
    sub->add_option("--method", f.method, "itlumm or maddness")->capture_default_str();
  }

  // cost
  std::size_t cost_d = 0, cost_m = 0;
  std::string cost_c = "1,2,4,8,16", cost_model;
  double cost_ratio = 1.0;
  auto* cost_cmd = app.add_subcommand("cost", "LAC cost model for one layer shape or every layer of a model");
  cost_cmd->add_option("--d", cost_d, "inner dimension");
  cost_cmd->add_option("--m", cost_m, "output dimension");
  cost_cmd->add_option("--model", cost_model, "model archive (every layer)");
  cost_cmd->add_option("--codebooks,-c", cost_c)->capture_default_str();
  cost_cmd->add_option("--mac-lac-ratio", cost_ratio)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*train_cmd) {
      const auto widths = parse_sizes(arch, "--arch");
      if (widths.size() < 2) throw ArgumentError("--arch needs at least an input and an output width");
      tcfg.validate();
      const LabeledDataset tr = load_split(train_data, true);
      const LabeledDataset te = load_split(train_data, false);
      Rng rng(tcfg.seed);
      MlpModel model = make_mlp(widths, rng);
      model.metadata["dataset"] = train_data.dataset;
      model.metadata["arch"] = arch;
      model.metadata["version"] = version_string();
      const TrainReport report = train(model, tr, tcfg);
      model.metadata["epochs"] = std::to_string(report.loss.size() - 1);
      save_model(model, out_path);
      std::printf("train loss %.4f  test accuracy %.4f  (%zu epochs, %zu train / %zu test rows)\nwrote %s\n",
                  report.loss.back(), accuracy(model, te), report.loss.size() - 1, tr.size(), te.size(), out_path.c_str());
    } else if (*cost_cmd) {
      const auto cs = parse_sizes(cost_c, "--codebooks");
      std::vector<std::pair<std::size_t, std::size_t>> shapes;
      if (!cost_model.empty()) {
        const MlpModel m = load_model(cost_model);
        for (const auto& layer : m.layers) shapes.emplace_back(layer_input_dim(layer), layer_output_dim(layer));
      } else if (cost_d && cost_m) {
        shapes.emplace_back(cost_d, cost_m);
      } else {
        throw ArgumentError("cost: give --model or both --d and --m");
      }
      std::printf("%5s %6s %6s %4s %12s %12s %8s %9s\n", "layer", "d", "m", "C", "amm", "exact", "ratio", "breakeven");
      for (std::size_t l = 0; l < shapes.size(); ++l)
        for (std::size_t c : cs) {
          const CostModel cm = lac_cost_model(shapes[l].first, shapes[l].second, c, cost_ratio);
          std::printf("%5zu %6zu %6zu %4zu %12.1f %12.1f %8.4f %9.3f\n", l, shapes[l].first, shapes[l].second, c,
                      cm.amm_cost, cm.exact_cost, cm.amm_cost / cm.exact_cost, cm.breakeven_c);
        }
    } else {
      CLI::App* sub = *ablate_cmd ? ablate_cmd : *replace_cmd ? replace_cmd : compare_cmd;
      const ExperimentFlags& f = *ablate_cmd ? abl : *replace_cmd ? rep : cmp;
      const ExperimentConfig cfg = experiment_config(f);
      std::vector<CompareVariant> vs;
      std::vector<PartitionKind> ps;
      if (sub == compare_cmd) {
        for (const auto& n : split_names(variants)) vs.push_back(parse_compare_variant(n));
        for (const auto& n : split_names(partitions)) ps.push_back(parse_partition_kind(n));
      }
      const MlpModel model = load_model(f.model_path);
      const LabeledDataset tr = load_split(f.data, true);
      const LabeledDataset te = load_split(f.data, false);
      std::printf("exact test accuracy %.4f\n", accuracy(model, te));
      std::vector<ExperimentRow> rows;
      if (sub == ablate_cmd)
        rows = run_ablation(model, tr, te, cfg);
      else if (sub == replace_cmd)
      {
        if (both || !no_finetune) rows = run_replace_all(model, tr, te, cfg, true);
        if (both || no_finetune) {
          const auto more = run_replace_all(model, tr, te, cfg, false);
          rows.insert(rows.end(), more.begin(), more.end());
        }
      }
      else
        rows = run_compare(model, tr, te, cfg, vs, ps);
      write_outputs(rows, f.csv_path, sub, f.seed, argc, argv);
    }
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitNumerical;
  } catch (const SingularSystemError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
  return 0;
}
