#include "rifl/cli.hpp"

#include <filesystem>
#include <optional>

#include "CLI11.hpp"
#include "rifl/attacks.hpp"
#include "rifl/checkpoint.hpp"
#include "rifl/codec.hpp"
#include "rifl/config.hpp"
#include "rifl/dataset.hpp"
#include "rifl/defense.hpp"
#include "rifl/theory.hpp"

namespace rifl {

namespace {

namespace fs = std::filesystem;

struct Options {
  std::string config, model, input, output, mode;
  std::optional<int> epsilon, iters;
  std::optional<std::uint64_t> seed;
};

class CliError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::span<const std::uint8_t> as_bytes(const std::string& s) {
  return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file(path.string(), as_bytes(text));
}

void write_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file(path.string(), bytes);
}

class Context {
 public:
  Context(std::string command, const Options& o, std::ostream& out) : command_(std::move(command)), o_(o), out_(out) {
    if (!o.config.empty()) cfg_ = ExperimentConfig::load(o.config);
    // Flag overrides go through the config so they are part of the hash.
    if (o.seed) cfg_.set("seed", std::to_string(*o.seed));
    if (!o.mode.empty()) cfg_.set(command_ == "train" ? "train.mode" : "attack.mode", o.mode);
    if (o.epsilon) cfg_.set("attack.epsilon", std::to_string(*o.epsilon));
    if (o.iters) cfg_.set("attack.iters", std::to_string(*o.iters));
    cfg_.finalize();
  }

  const ExperimentConfig& cfg() const { return cfg_; }

  LoadedCheckpoint model() const {
    if (o_.model.empty()) throw CliError("--model is required");
    auto ckpt = load_checkpoint(read_file(o_.model));
    model_note_ = "model=" + o_.model + " fingerprint=" + hex64(ckpt.fingerprint) + " mode=" + ckpt.meta.mode +
                  " seed=" + std::to_string(ckpt.meta.seed) + " config_hash=" + hex64(ckpt.meta.config_hash);
    out_ << "model " << o_.model << " (" << describe(ckpt.model.config()) << ", mode " << ckpt.meta.mode
         << ", seed " << ckpt.meta.seed << ", config " << hex64(ckpt.meta.config_hash) << ")\n";
    return ckpt;
  }

  /// All of --input, or the held-out part of the configured dataset.
  std::vector<Image> eval_images() const {
    if (!o_.input.empty()) return load_dataset(o_.input);
    auto all = load_dataset(cfg_.dataset);
    auto test = split_dataset(all, std::min(cfg_.train_count, all.size())).second;
    if (test.empty()) throw CliError("dataset '" + cfg_.dataset + "' has no held-out images after train_count");
    return test;
  }

  fs::path output_file(const std::string& fallback) const {
    return o_.output.empty() ? fs::path(cfg_.output_dir) / fallback : fs::path(o_.output);
  }
  fs::path output_dir() const { return o_.output.empty() ? fs::path(cfg_.output_dir) : fs::path(o_.output); }

  void save(const fs::path& path, CsvTable table) const {
    table.comment("command=" + command_);
    cfg_.annotate(table);
    if (!model_note_.empty()) table.comment(model_note_);
    write_text(path, table.str());
    out_ << "wrote " << path.string() << "\n";
  }

  std::ostream& out() const { return out_; }
  const Options& opts() const { return o_; }

 private:
  std::string command_;
  const Options& o_;
  std::ostream& out_;
  ExperimentConfig cfg_;
  mutable std::string model_note_;
};

void check_shape(const FlowModel& model, const std::vector<Image>& images) {
  const auto& a = model.config();
  for (std::size_t i = 0; i < images.size(); ++i)
    if (images[i].channels != a.channels || images[i].height != a.height || images[i].width != a.width)
      throw CliError("image " + std::to_string(i) + " is " + std::to_string(images[i].channels) + "x" +
                     std::to_string(images[i].height) + "x" + std::to_string(images[i].width) + ", model expects " +
                     describe(a));
}

void run_train(const Context& ctx) {
  const auto& cfg = ctx.cfg();
  std::vector<Image> train_set, heldout;
  if (!ctx.opts().input.empty()) {
    train_set = load_dataset(ctx.opts().input);
  } else {
    auto all = load_dataset(cfg.dataset);
    std::tie(train_set, heldout) = split_dataset(all, std::min(cfg.train_count, all.size()));
  }
  FlowConfig arch = cfg.arch;
  arch.channels = train_set.front().channels;
  arch.height = train_set.front().height;
  arch.width = train_set.front().width;
  FlowModel model(arch, cfg.seed);
  check_shape(model, train_set);
  const auto result = train(model, train_set, heldout, cfg.train);
  const auto path = ctx.output_file("model.rifm");
  write_bytes(path, save_checkpoint(model, {to_string(cfg.train.mode), cfg.seed, cfg.hash()}));
  ctx.out() << "wrote " << path.string() << "\n";
  ctx.save(path.string() + ".epochs.csv", epoch_csv(result));
  if (!result.epochs.empty()) ctx.out() << "final held-out bpd " << fmt6(result.epochs.back().clean_bpd) << "\n";
}

void run_compress(const Context& ctx) {
  const auto ckpt = ctx.model();
  if (ctx.opts().input.empty() || ctx.opts().output.empty()) throw CliError("--input and --output are required");
  const auto images = load_dataset(ctx.opts().input);
  if (images.size() != 1) throw CliError("--input must hold exactly one image, got " + std::to_string(images.size()));
  check_shape(ckpt.model, images);
  const auto r = compress(ckpt.model, images.front(), ckpt.fingerprint);
  write_bytes(ctx.opts().output, r.stream.serialize());
  ctx.out() << "wrote " << ctx.opts().output << ": " << (r.stream.mode == CodingMode::raw ? "raw" : "coded")
            << ", model bpd " << fmt6(r.model_rate.total_bpd) << ", realized bpd " << fmt6(r.realized_bpd)
            << ", CR " << fmt6(r.cr) << "\n";
}

void run_decompress(const Context& ctx) {
  const auto ckpt = ctx.model();
  if (ctx.opts().input.empty() || ctx.opts().output.empty()) throw CliError("--input and --output are required");
  const auto stream = Bitstream::parse(read_file(ctx.opts().input));
  const Image img = decompress(ckpt.model, stream, ckpt.fingerprint);
  const auto ext = fs::path(ctx.opts().output).extension();
  write_bytes(ctx.opts().output, ext == ".rifd" ? encode_rifd({img}) : encode_pnm(img));
  ctx.out() << "wrote " << ctx.opts().output << "\n";
}

void run_attack(const Context& ctx) {
  const auto ckpt = ctx.model();
  const auto images = ctx.eval_images();
  check_shape(ckpt.model, images);
  const auto& cfg = ctx.cfg();
  const auto traces = attack_images(ckpt.model, images, cfg.attack);
  const auto dir = ctx.output_dir();

  std::vector<Image> adversarial;
  CsvTable steps({"image", "iteration", "loss_fo1", "loss_fo2", "loss_mf", "clamped_fo1", "clamped_fo2",
                  "clamped_mf", "delta_fo1", "delta_fo2", "delta_mf", "w_fo1", "w_fo2", "w_mf", "weighted_loss",
                  "linf"});
  for (std::size_t i = 0; i < traces.size(); ++i) {
    adversarial.push_back(traces[i].adversarial);
    for (const AttackStep& s : traces[i].steps) {
      auto& r = steps.row();
      r.add(static_cast<unsigned long>(i)).add(s.iteration);
      for (const auto* arr : {&s.loss, &s.clamped, &s.delta, &s.weight})
        for (double v : *arr) r.add(v);
      r.add(s.weighted_loss).add(s.linf);
    }
  }
  write_bytes(dir / "adversarial.rifd", encode_rifd(adversarial));
  ctx.out() << "wrote " << (dir / "adversarial.rifd").string() << "\n";
  ctx.save(dir / "attack_trace.csv", steps);

  const auto clean = summarize(traces, true), adv = summarize(traces, false);
  ctx.save(dir / "attack_summary.csv", summary_csv({clean, adv}));
  ctx.out() << "clean CR " << fmt6(clean.mean_cr) << ", " << adv.attack << " eps " << adv.epsilon << " CR "
            << fmt6(adv.mean_cr) << " over " << traces.size() << " images\n";
}

void run_universality(const Context& ctx) {
  const auto ckpt = ctx.model();
  const auto images = ctx.eval_images();
  check_shape(ckpt.model, images);
  const auto& cfg = ctx.cfg();
  const auto rows =
      universality_eval(ckpt.model, images, cfg.attack, cfg.universality_epsilons, cfg.universality_repeats, cfg.seed);
  ctx.save(ctx.output_file("universality.csv"), universality_csv(rows));
  for (const auto& r : rows)
    ctx.out() << to_string(r.attack) << " eps " << r.epsilon << ": clean CR " << fmt6(r.clean_cr) << ", transferred CR "
              << fmt6(r.transferred_cr) << "\n";
}

void run_verify_theory(const Context& ctx) {
  const auto& cfg = ctx.cfg();
  const auto suite = verify_theory(cfg.theory_trials, cfg.seed);
  const auto dir = ctx.output_dir();
  ctx.save(dir / "theory_bounds.csv", bound_report_csv(suite.reports));
  ctx.save(dir / "theory_theorem.csv", theorem_csv(suite.theorems));
  ctx.save(dir / "theory_probe.csv", probe_csv(suite.probes));
  std::size_t violations = 0;
  for (const auto& r : suite.reports) {
    ctx.out() << summary(r) << "\n";
    violations += r.violations;
  }
  if (violations) throw CliError(std::to_string(violations) + " bound violations");
}

void run_ablate(const Context& ctx) {
  const auto& cfg = ctx.cfg();
  auto all = !ctx.opts().input.empty() ? load_dataset(ctx.opts().input) : load_dataset(cfg.dataset);
  const auto [train_set, test] = split_dataset(all, std::min(cfg.train_count, all.size()));
  if (test.empty()) throw CliError("ablation needs held-out images after train_count");
  FlowConfig arch = cfg.arch;
  arch.channels = all.front().channels;
  arch.height = all.front().height;
  arch.width = all.front().width;
  const auto result = ablation_suite(arch, train_set, test, cfg.train, cfg.attack.iters);
  ctx.save(ctx.output_file("ablation.csv"), ablation_csv(result));
}

void run_eval(const Context& ctx) {
  const auto ckpt = ctx.model();
  const auto images = ctx.eval_images();
  check_shape(ckpt.model, images);
  CsvTable table({"image", "model_bpd", "realized_bpd", "cr", "coding"});
  double model_bpd = 0.0, bpd = 0.0, cr = 0.0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto r = compress(ckpt.model, images[i], ckpt.fingerprint);
    table.row()
        .add(static_cast<unsigned long>(i))
        .add(r.model_rate.total_bpd)
        .add(r.realized_bpd)
        .add(r.cr)
        .add(r.stream.mode == CodingMode::raw ? "raw" : "coded");
    model_bpd += r.model_rate.total_bpd;
    bpd += r.realized_bpd;
    cr += r.cr;
  }
  const double n = static_cast<double>(images.size());
  ctx.out() << "images " << images.size() << ", mean model bpd " << fmt6(model_bpd / n) << ", mean realized bpd "
            << fmt6(bpd / n) << ", mean CR " << fmt6(cr / n) << "\n";
  if (!ctx.opts().output.empty()) ctx.save(ctx.opts().output, table);
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Robust integer discrete flows: training, coding, attacks and theory checks", "rifl"};
  app.require_subcommand(1);
  Options o;

  using Runner = void (*)(const Context&);
  const std::vector<std::tuple<std::string, std::string, Runner>> commands = {
      {"train", "train a flow and write a RIFM checkpoint", run_train},
      {"compress", "code one image into a RIFL bitstream", run_compress},
      {"decompress", "decode a RIFL bitstream to PPM/PGM/RIFD", run_decompress},
      {"attack", "PGD, AW-PGD or random-noise attack against the codec", run_attack},
      {"universality", "transfer single-image perturbations to other images", run_universality},
      {"verify-theory", "check the likelihood-sensitivity bounds on toy models", run_verify_theory},
      {"ablate", "train the four (rho1, rho2) variants and attack each", run_ablate},
      {"eval", "clean model and realized rates", run_eval},
  };
  for (const auto& [name, help, run] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "key=value experiment config");
    sub->add_option("--model", o.model, "RIFM checkpoint");
    sub->add_option("--input", o.input, "image, directory, RIFD file or synthetic-textures:N:SEED");
    sub->add_option("--output", o.output, "output file or directory");
    sub->add_option("--mode", o.mode, "training mode (train) or attack mode");
    sub->add_option("--epsilon", o.epsilon, "attack radius in pixel levels");
    sub->add_option("--iters", o.iters, "attack iterations");
    sub->add_option("--seed", o.seed, "overrides the config seed");
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "rifl: " << e.what() << "\n";
    return 2;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    Context ctx(name, o, out);
    for (const auto& [cmd, help, run] : commands)
      if (cmd == name) run(ctx);
  } catch (const std::exception& e) {
    err << "rifl " << name << ": " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace rifl
