#include "uqseg_cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "uqseg/uqseg.hpp"

namespace uqseg::cli {
namespace {

using nlohmann::json;

/// Paths written by a command, in write order.
using Produced = std::vector<fs::path>;

unsigned resolve_threads(int flag) {
  if (flag > 0) return static_cast<unsigned>(flag);
  if (const char* env = std::getenv("UQSEG_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<unsigned>(v);
    throw DataError("UQSEG_THREADS must be a positive integer");
  }
  return 1;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

bool has_png_extension(const fs::path& p) { return p.extension() == ".png"; }

/// Writes a confidence map as UQT1, or as 16-bit PNG when the path ends in .png.
void write_confidence(const fs::path& path, const ConfidenceMap& conf) {
  if (has_png_extension(path)) save_confidence_png16(path, conf);
  else save_confidence(path, conf);
}

template <typename T>
T json_get(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw DataError(std::string("config key '") + key + "': " + e.what());
  }
}

// ---------------------------------------------------------------------------
// calibration parameter files

json temperature_to_json(const TemperatureParams& p) { return json{{"tau", p.tau}}; }

json poly_to_json(const PolyTemperatureParams& p) {
  return json{{"tau1", p.tau[0]},
              {"tau2", p.tau[1]},
              {"tau3", p.tau[2]},
              {"enabled", {p.enabled[0], p.enabled[1], p.enabled[2]}}};
}

/// Applies calibration parameters ({tau} or {tau1,tau2,tau3,enabled}) to logits.
ProbabilityMap apply_params(const LogitMap& logits, const json& params) {
  if (params.contains("tau")) return apply_temperature(logits, {params.at("tau").get<double>()});
  PolyTemperatureParams p;
  p.tau = {json_get(params, "tau1", 1.0), json_get(params, "tau2", 1.0),
           json_get(params, "tau3", 1.0)};
  const auto enabled = json_get(params, "enabled", std::vector<bool>{true, false, false});
  detail::require(enabled.size() == 3, "'enabled' must list three flags");
  p.enabled = {enabled[0], enabled[1], enabled[2]};
  return apply_poly_temperature(logits, p);
}

ConfidenceMap max_probability(const ProbabilityMap& probs) {
  std::vector<float> out(probs.pixels(), 0.0f);
  for (std::size_t c = 0; c < probs.channels(); ++c)
    for (std::size_t p = 0; p < probs.pixels(); ++p) out[p] = std::max(out[p], probs.at(c, p));
  return ConfidenceMap(probs.height(), probs.width(), std::move(out));
}

MaskFormerOutput load_mask_output(const fs::path& class_scores, const fs::path& mask_logits) {
  const Tensor c = read_uqt1(class_scores);
  const Tensor m = read_uqt1(mask_logits);
  detail::require(c.dims.size() == 2, "class scores must be a 2-d (N, classes) tensor");
  detail::require(m.dims.size() == 3, "mask logits must be a 3-d (N, H, W) tensor");
  detail::require(c.dims[0] == m.dims[0], "query counts differ between scores and masks");
  MaskFormerOutput out;
  out.num_queries = c.dims[0];
  out.num_classes = c.dims[1];
  out.height = m.dims[1];
  out.width = m.dims[2];
  out.class_scores.assign(c.data.begin(), c.data.end());
  out.mask_logits.assign(m.data.begin(), m.data.end());
  return out;
}

// ---------------------------------------------------------------------------
// augmentation configs

RainConfig rain_config(const json& j) {
  RainConfig c;
  c.density = json_get(j, "density", c.density);
  c.streak_length = json_get(j, "streak_length", c.streak_length);
  c.angle = json_get(j, "angle", c.angle);
  c.blur_sigma = json_get(j, "blur_sigma", c.blur_sigma);
  c.intensity = json_get(j, "intensity", c.intensity);
  return c;
}

SnowConfig snow_config(const json& j) {
  SnowConfig c;
  c.particle_density = json_get(j, "particle_density", c.particle_density);
  if (j.contains("size_range")) {
    const auto r = json_get(j, "size_range", std::vector<double>{});
    detail::require(r.size() == 2, "size_range must be [min, max]");
    c.size_min = r[0];
    c.size_max = r[1];
  }
  c.vertical_blur = json_get(j, "vertical_blur", c.vertical_blur);
  c.cold_shift = json_get(j, "cold_shift", c.cold_shift);
  return c;
}

NightConfig night_config(const json& j) {
  NightConfig c;
  c.brightness = json_get(j, "brightness", c.brightness);
  c.contrast = json_get(j, "contrast", c.contrast);
  c.saturation = json_get(j, "saturation", c.saturation);
  c.hue_shift = json_get(j, "hue_shift", c.hue_shift);
  return c;
}

CutoutConfig cutout_config(const json& j) {
  CutoutConfig c;
  c.rect_fraction = json_get(j, "rect_fraction", c.rect_fraction);
  c.fill_value = json_get(j, "fill_value", c.fill_value);
  return c;
}

CropRect crop_rect(const json& j) {
  return CropRect{json_get<std::size_t>(j, "x", 0), json_get<std::size_t>(j, "y", 0),
                  json_get<std::size_t>(j, "width", 0), json_get<std::size_t>(j, "height", 0)};
}

// ---------------------------------------------------------------------------

/// All subcommands with their options. Parsing only fills the fields; nothing
/// touches the filesystem until execute().
class Cli {
 public:
  Cli() : app_("Uncertainty toolkit for semantic segmentation outputs", "uqseg") {
    app_.require_subcommand(1);
    app_.set_help_all_flag("--help-all", "Show help for all subcommands");
    add_eval();
    add_score();
    add_calibrate();
    add_fuse();
    add_augment();
    add_adapt();
    add_loss();
    add_sample_plan();
    add_conf_filter();
    add_pipeline();
  }

  CLI::App& app() { return app_; }

  void parse(const std::vector<std::string>& args) {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app_.parse(reversed);
  }

  std::string selected() const {
    for (auto* sub : app_.get_subcommands()) return sub->get_name();
    return {};
  }

  Produced execute(std::ostream& out, std::ostream& err);

 private:
  void add_eval();
  void add_score();
  void add_calibrate();
  void add_fuse();
  void add_augment();
  void add_adapt();
  void add_loss();
  void add_sample_plan();
  void add_conf_filter();
  void add_pipeline();

  Produced run_eval(std::ostream& out);
  Produced run_score();
  Produced run_calibrate(std::ostream& out);
  Produced run_fuse();
  Produced run_augment(std::ostream& out);
  Produced run_adapt(std::ostream& out);
  Produced run_loss(std::ostream& out);
  Produced run_sample_plan(std::ostream& out);
  Produced run_conf_filter();
  Produced run_pipeline(std::ostream& out, std::ostream& err);

  CLI::App app_;
  int threads_ = 0;
  int num_classes_ = 19;
  std::vector<int> ood_ids_{kIgnoreId};

  struct {
    std::string manifest, out_dir = ".", aggregate = "global";
    int bins = 15;
  } eval_;
  struct {
    std::string method = "msp", logits, out_pred, out_conf, params, class_scores, mask_logits;
    double temperature = 1.0;
  } score_;
  struct {
    std::string method = "ts", manifest, out_params, objective = "ece";
    int bins = 15;
  } calibrate_;
  struct {
    std::string op, out, background, overlay, config, connectivity = "8";
    std::vector<std::string> inputs;
    std::size_t preferred = 0;
    double threshold = 0.6, low = 0.6, ood_fraction = 0.5, ood_conf = 0.4;
    int kernel = 3, bias_a = -1, bias_b = -1;
  } fuse_;
  struct {
    std::string kind, config, in, out, labels;
    std::uint64_t seed = 0;
    double fraction = 1.0;
  } augment_;
  struct {
    std::string running, instance, out_alpha, out_stats;
  } adapt_;
  struct {
    std::string kind, logits, gt, targets, config, out_map;
  } loss_;
  struct {
    std::string freqs;
    int bias = 0;
  } sample_;
  struct {
    std::string conf, pred, out;
    std::size_t top_k = 3;
  } filter_;
  struct {
    std::string config, produced;
  } pipeline_;
};

void Cli::add_eval() {
  auto* sub = app_.add_subcommand("eval", "Evaluate a manifest and write report.json/report.csv");
  sub->add_option("--manifest", eval_.manifest, "JSON-lines manifest")->required();
  sub->add_option("--num-classes", num_classes_, "Number of in-distribution classes")
      ->capture_default_str();
  sub->add_option("--ood-ids", ood_ids_, "Ground-truth ids treated as OOD")->capture_default_str();
  sub->add_option("--bins", eval_.bins, "ECE bins")->capture_default_str()->check(CLI::PositiveNumber);
  sub->add_option("--aggregate", eval_.aggregate, "Aggregation mode")
      ->check(CLI::IsMember({"global", "per-image"}))
      ->capture_default_str();
  sub->add_option("--out-dir", eval_.out_dir, "Report directory")->capture_default_str();
  sub->add_option("--threads", threads_, "Worker threads (default: UQSEG_THREADS or 1)");
}

void Cli::add_score() {
  auto* sub = app_.add_subcommand("score", "Prediction and confidence maps from logits");
  sub->add_option("--method", score_.method)
      ->check(CLI::IsMember({"msp", "energy", "mask"}))
      ->capture_default_str();
  sub->add_option("--logits", score_.logits, "UQT1 logits (C,H,W)");
  sub->add_option("--out-pred", score_.out_pred, "Prediction PNG")->required();
  sub->add_option("--out-conf", score_.out_conf, "Confidence map (.uqt1, or .png for 16-bit)")
      ->required();
  sub->add_option("--params", score_.params, "Calibration parameter JSON applied before msp");
  sub->add_option("--temperature", score_.temperature, "Temperature for the mask method")
      ->capture_default_str();
  sub->add_option("--class-scores", score_.class_scores, "UQT1 (N, classes) query scores");
  sub->add_option("--mask-logits", score_.mask_logits, "UQT1 (N, H, W) mask logits");
}

void Cli::add_calibrate() {
  auto* sub = app_.add_subcommand("calibrate", "Fit temperature or polynomial temperature scaling");
  sub->add_option("--method", calibrate_.method)->check(CLI::IsMember({"ts", "pts"}))->capture_default_str();
  sub->add_option("--val-manifest", calibrate_.manifest, "Manifest whose records carry logits")->required();
  sub->add_option("--out-params", calibrate_.out_params, "Output parameter JSON")->required();
  sub->add_option("--objective", calibrate_.objective)->check(CLI::IsMember({"ece", "nll"}))->capture_default_str();
  sub->add_option("--bins", calibrate_.bins)->capture_default_str()->check(CLI::PositiveNumber);
  sub->add_option("--num-classes", num_classes_)->capture_default_str();
}

void Cli::add_fuse() {
  auto* sub = app_.add_subcommand("fuse", "Combine model outputs");
  sub->add_option("--op", fuse_.op)
      ->required()
      ->check(CLI::IsMember({"avg", "vote", "recip", "overlay", "regionnorm", "biasood"}));
  sub->add_option("--in", fuse_.inputs, "Input maps (repeatable)");
  sub->add_option("--out", fuse_.out, "Output path")->required();
  sub->add_option("--preferred", fuse_.preferred, "vote: tie-break model index")->capture_default_str();
  sub->add_option("--background", fuse_.background, "overlay: background confidence");
  sub->add_option("--overlay", fuse_.overlay, "overlay: overlaid confidence");
  sub->add_option("--threshold", fuse_.threshold, "overlay: strict upper bound")->capture_default_str();
  sub->add_option("--config", fuse_.config, "regionnorm: JSON config");
  sub->add_option("--low", fuse_.low)->capture_default_str();
  sub->add_option("--ood-fraction", fuse_.ood_fraction)->capture_default_str();
  sub->add_option("--ood-conf", fuse_.ood_conf)->capture_default_str();
  sub->add_option("--kernel", fuse_.kernel)->capture_default_str();
  sub->add_option("--connectivity", fuse_.connectivity)->check(CLI::IsMember({"4", "8"}))->capture_default_str();
  sub->add_option("--bias-a", fuse_.bias_a, "biasood: bias class of model A");
  sub->add_option("--bias-b", fuse_.bias_b, "biasood: bias class of model B");
  sub->add_option("--num-classes", num_classes_)->capture_default_str();
}

void Cli::add_augment() {
  auto* sub = app_.add_subcommand("augment", "Synthesize adverse conditions over a directory");
  sub->add_option("--kind", augment_.kind)
      ->required()
      ->check(CLI::IsMember({"rain", "snow", "night", "cutout", "flip", "rot90", "crop"}));
  sub->add_option("--config", augment_.config, "JSON config");
  sub->add_option("--seed", augment_.seed)->capture_default_str();
  sub->add_option("--in", augment_.in, "Directory of UQT1 images")->required();
  sub->add_option("--out", augment_.out, "Output directory")->required();
  sub->add_option("--labels", augment_.labels, "Directory of PNG labels (geometric kinds)");
  sub->add_option("--fraction", augment_.fraction, "Fraction of images to augment")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  sub->add_option("--threads", threads_);
}

void Cli::add_adapt() {
  auto* sub = app_.add_subcommand("adapt", "Blend running and instance normalization statistics");
  sub->add_option("--running", adapt_.running, "Running statistics directory")->required();
  sub->add_option("--instance", adapt_.instance, "Instance statistics directory")->required();
  sub->add_option("--out-alpha", adapt_.out_alpha, "JSON with the mixing coefficient")->required();
  sub->add_option("--out-stats", adapt_.out_stats, "Directory for the blended statistics")->required();
}

void Cli::add_loss() {
  auto* sub = app_.add_subcommand("loss", "Per-pixel loss values");
  sub->add_option("--kind", loss_.kind)->required()->check(CLI::IsMember({"ce", "ohem", "focal", "softce"}));
  sub->add_option("--logits", loss_.logits)->required();
  sub->add_option("--gt", loss_.gt, "Ground-truth PNG (ce, ohem, focal)");
  sub->add_option("--targets", loss_.targets, "Soft targets UQT1 (softce)");
  sub->add_option("--config", loss_.config, "JSON config");
  sub->add_option("--out-map", loss_.out_map, "Per-pixel loss UQT1");
}

void Cli::add_sample_plan() {
  auto* sub = app_.add_subcommand("sample-plan", "Print per-class inclusion probabilities");
  sub->add_option("--freqs", sample_.freqs, "Class frequencies: inline JSON array or a JSON file")->required();
  sub->add_option("--bias", sample_.bias, "Biased class id")->required();
}

void Cli::add_conf_filter() {
  auto* sub = app_.add_subcommand("conf-filter", "Mask low-confidence pseudo-label pixels");
  sub->add_option("--conf", filter_.conf)->required();
  sub->add_option("--pred", filter_.pred)->required();
  sub->add_option("--out", filter_.out, "Mask PNG")->required();
  sub->add_option("--top-k", filter_.top_k)->capture_default_str();
  sub->add_option("--num-classes", num_classes_)->capture_default_str();
}

void Cli::add_pipeline() {
  auto* sub = app_.add_subcommand("pipeline", "Run an ordered list of subcommands");
  sub->add_option("--config", pipeline_.config, "Pipeline JSON")->required();
  sub->add_option("--produced", pipeline_.produced,
                  "Where to write the list of produced files (default: next to the config)");
}

Produced Cli::execute(std::ostream& out, std::ostream& err) {
  const std::string name = selected();
  if (name == "eval") return run_eval(out);
  if (name == "score") return run_score();
  if (name == "calibrate") return run_calibrate(out);
  if (name == "fuse") return run_fuse();
  if (name == "augment") return run_augment(out);
  if (name == "adapt") return run_adapt(out);
  if (name == "loss") return run_loss(out);
  if (name == "sample-plan") return run_sample_plan(out);
  if (name == "conf-filter") return run_conf_filter();
  if (name == "pipeline") return run_pipeline(out, err);
  throw Error("no subcommand selected");
}

// ---------------------------------------------------------------------------

Produced Cli::run_eval(std::ostream& out) {
  const DatasetManifest manifest =
      load_manifest(eval_.manifest, num_classes_, ClassIdSet(ood_ids_.begin(), ood_ids_.end()));
  EvalConfig cfg;
  cfg.aggregation = parse_aggregation(eval_.aggregate);
  cfg.num_bins = eval_.bins;
  cfg.num_threads = resolve_threads(threads_);
  const EvalReport report = evaluate_dataset(manifest, cfg);
  const fs::path dir(eval_.out_dir);
  write_text(dir / "report.json", report_json_string(report));
  write_text(dir / "report.csv", report_csv_string(report));
  out << report_table_string(report);
  return {dir / "report.json", dir / "report.csv"};
}

Produced Cli::run_score() {
  ClassMap pred;
  ConfidenceMap conf;
  if (score_.method == "mask") {
    detail::require(!score_.class_scores.empty() && !score_.mask_logits.empty(),
                    "--method mask needs --class-scores and --mask-logits");
    auto r = maskformer_output(load_mask_output(score_.class_scores, score_.mask_logits),
                               {score_.temperature});
    pred = std::move(r.prediction);
    conf = std::move(r.confidence);
  } else {
    detail::require(!score_.logits.empty(), "--logits is required for msp and energy");
    const LogitMap logits = load_logits(score_.logits);
    pred = argmax_prediction(logits);
    if (score_.method == "energy") {
      detail::require(score_.params.empty(), "--params applies to msp only");
      conf = score_confidence(logits, {ScoreMethod::kEnergy, true});
    } else if (!score_.params.empty()) {
      conf = max_probability(apply_params(logits, read_json(score_.params)));
    } else {
      conf = msp_confidence(logits);
    }
  }
  save_class_map(score_.out_pred, pred);
  write_confidence(score_.out_conf, conf);
  return {score_.out_pred, score_.out_conf};
}

Produced Cli::run_calibrate(std::ostream& out) {
  const DatasetManifest manifest = load_manifest(calibrate_.manifest, num_classes_);
  if (manifest.records.empty()) throw DataError("empty manifest");
  CalibrationSet set;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& r = manifest.records[i];
    if (!r.logits) throw DataError("record " + std::to_string(i) + ": calibration needs 'logits'");
    try {
      const LogitMap logits = load_logits(*r.logits);
      detail::require(logits.channels() == static_cast<std::size_t>(num_classes_),
                      "logit channels differ from --num-classes");
      set.add(logits, load_class_map(r.gt, num_classes_));
    } catch (const DataError& e) {
      throw RecordError(i, e.what());
    }
  }
  FitOptions opt;
  opt.objective = parse_objective(calibrate_.objective);
  opt.num_bins = calibrate_.bins;
  json params;
  if (calibrate_.method == "ts") {
    const TemperatureFit fit = fit_temperature(set, opt);
    params = temperature_to_json(fit.params);
    out << "tau " << format_number(fit.params.tau) << "  objective "
        << format_number(fit.objective_before) << " -> " << format_number(fit.objective_after)
        << "\n";
  } else {
    const PolyTemperatureFit fit = fit_poly_temperature(set, opt);
    params = poly_to_json(fit.params);
    out << "tau1 " << format_number(fit.params.tau[0]) << " tau2 "
        << format_number(fit.params.tau[1]) << " tau3 " << format_number(fit.params.tau[2])
        << "  objective " << format_number(fit.objective_before) << " -> "
        << format_number(fit.objective_after) << "\n";
  }
  write_text(calibrate_.out_params, params.dump(2) + "\n");
  return {calibrate_.out_params};
}

Produced Cli::run_fuse() {
  const std::string& op = fuse_.op;
  const fs::path outp(fuse_.out);
  auto need_inputs = [&](std::size_t n, bool at_least) {
    const bool ok = at_least ? fuse_.inputs.size() >= n : fuse_.inputs.size() == n;
    detail::require(ok, "--op " + op + " needs " + (at_least ? "at least " : "exactly ") +
                            std::to_string(n) + " --in inputs");
  };
  if (op == "avg") {
    need_inputs(1, true);
    std::vector<ProbabilityMap> maps;
    for (const auto& p : fuse_.inputs) maps.push_back(load_probabilities(p));
    write_uqt1(outp, to_tensor(average_probs(maps)));
  } else if (op == "vote") {
    need_inputs(2, true);
    std::vector<ClassMap> preds;
    for (const auto& p : fuse_.inputs) preds.push_back(load_class_map(p, num_classes_));
    save_class_map(outp, majority_vote(preds, {fuse_.preferred}));
  } else if (op == "recip") {
    need_inputs(2, false);
    write_confidence(outp, reciprocal_fuse(load_confidence(fuse_.inputs[0]),
                                           load_confidence(fuse_.inputs[1])));
  } else if (op == "overlay") {
    detail::require(!fuse_.background.empty() && !fuse_.overlay.empty(),
                    "--op overlay needs --background and --overlay");
    write_confidence(outp, overlay_fuse(load_confidence(fuse_.background),
                                        load_confidence(fuse_.overlay), fuse_.threshold));
  } else if (op == "regionnorm") {
    need_inputs(1, false);
    RegionNormConfig cfg{fuse_.low, fuse_.ood_fraction, fuse_.ood_conf, fuse_.kernel,
                         fuse_.connectivity == "4" ? Connectivity::kFour : Connectivity::kEight};
    if (!fuse_.config.empty()) {
      const json j = read_json(fuse_.config);
      cfg.low_conf_threshold = json_get(j, "low_conf_threshold", cfg.low_conf_threshold);
      cfg.ood_fraction_threshold = json_get(j, "ood_fraction_threshold", cfg.ood_fraction_threshold);
      cfg.ood_conf_threshold = json_get(j, "ood_conf_threshold", cfg.ood_conf_threshold);
      cfg.mean_filter_kernel = json_get(j, "mean_filter_kernel", cfg.mean_filter_kernel);
      const int conn = json_get(j, "connectivity", static_cast<int>(cfg.connectivity));
      detail::require(conn == 4 || conn == 8, "connectivity must be 4 or 8");
      cfg.connectivity = conn == 4 ? Connectivity::kFour : Connectivity::kEight;
    }
    write_confidence(outp, region_normalize(load_confidence(fuse_.inputs[0]), cfg));
  } else {
    need_inputs(2, false);
    detail::require(fuse_.bias_a >= 0 && fuse_.bias_b >= 0,
                    "--op biasood needs --bias-a and --bias-b");
    save_mask(outp, bias_disagreement_ood(load_class_map(fuse_.inputs[0], num_classes_),
                                          load_class_map(fuse_.inputs[1], num_classes_),
                                          fuse_.bias_a, fuse_.bias_b));
  }
  return {outp};
}

Produced Cli::run_augment(std::ostream& out) {
  const json cfg = augment_.config.empty() ? json::object() : read_json(augment_.config);
  const std::string& kind = augment_.kind;
  // Parse the config up front so a bad config fails before any output.
  const RainConfig rain = kind == "rain" ? rain_config(cfg) : RainConfig{};
  const SnowConfig snow = kind == "snow" ? snow_config(cfg) : SnowConfig{};
  const NightConfig night = kind == "night" ? night_config(cfg) : NightConfig{};
  const CutoutConfig cut = kind == "cutout" ? cutout_config(cfg) : CutoutConfig{};
  GeometricOp geo;
  if (kind == "flip") geo.kind = GeometricKind::kHFlip;
  if (kind == "rot90") geo.kind = GeometricKind::kRot90;
  if (kind == "crop") {
    geo.kind = GeometricKind::kCrop;
    geo.rect = crop_rect(cfg);
  }
  const bool geometric_kind = kind == "flip" || kind == "rot90" || kind == "crop";

  if (!fs::is_directory(augment_.in)) throw DataError("not a directory: " + augment_.in);
  std::vector<fs::path> images;
  for (const auto& e : fs::directory_iterator(augment_.in))
    if (e.is_regular_file() && e.path().extension() == ".uqt1") images.push_back(e.path());
  std::sort(images.begin(), images.end());
  const auto plan = corpus_plan(images.size(), augment_.fraction, augment_.seed);

  const fs::path out_dir(augment_.out);
  fs::create_directories(out_dir);
  Produced produced(plan.size());
  std::vector<std::optional<fs::path>> label_out(plan.size());
  detail::parallel_for(plan.size(), resolve_threads(threads_), [&](std::size_t k) {
    const std::size_t idx = plan[k];
    const fs::path& src = images[idx];
    const ImageTensor img = load_image(src);
    const std::uint64_t seed = image_seed(augment_.seed, idx);
    ImageTensor result;
    if (kind == "rain") {
      RainConfig c = rain;
      c.seed = seed;
      result = augment_rain(img, c);
    } else if (kind == "snow") {
      SnowConfig c = snow;
      c.seed = seed;
      result = augment_snow(img, c);
    } else if (kind == "night") {
      result = augment_night(img, night);
    } else if (kind == "cutout") {
      CutoutConfig c = cut;
      c.seed = seed;
      result = cutout(img, c);
    } else {
      result = geometric(img, geo);
    }
    produced[k] = out_dir / src.filename();
    write_uqt1(produced[k], to_tensor(result));
    if (geometric_kind && !augment_.labels.empty()) {
      const fs::path label = fs::path(augment_.labels) / (src.stem().string() + ".png");
      if (fs::exists(label)) {
        label_out[k] = out_dir / label.filename();
        save_class_map(*label_out[k], geometric(load_class_map(label, kIgnoreId - 1), geo));
      }
    }
  });
  for (auto& l : label_out)
    if (l) produced.push_back(*l);
  out << "augmented " << plan.size() << " of " << images.size() << " images\n";
  return produced;
}

Produced Cli::run_adapt(std::ostream& out) {
  const FeatureStats running = load_feature_stats(adapt_.running);
  const FeatureStats instance = load_feature_stats(adapt_.instance);
  const MixingCoefficient alpha = mixing_coefficient(running, instance);
  const FeatureStats mixed = mix_stats(running, instance, alpha);
  json j{{"alpha", alpha.alpha}, {"layer_kl", layer_kl(running, instance)}};
  write_text(adapt_.out_alpha, j.dump(2) + "\n");
  save_feature_stats(adapt_.out_stats, mixed);
  out << "alpha " << format_number(alpha.alpha) << "\n";
  return {adapt_.out_alpha, fs::path(adapt_.out_stats) / "index.json"};
}

Produced Cli::run_loss(std::ostream& out) {
  const json cfg = loss_.config.empty() ? json::object() : read_json(loss_.config);
  const LogitMap logits = load_logits(loss_.logits);
  const auto ignore = static_cast<std::uint8_t>(json_get(cfg, "ignore_id", int{kIgnoreId}));
  PixelLosses losses;
  double scalar = 0.0;
  if (loss_.kind == "softce") {
    detail::require(!loss_.targets.empty(), "--kind softce needs --targets");
    const RealMap values = soft_ce(logits, load_probabilities(loss_.targets));
    losses = {values, BinaryMask(values.height(), values.width(), 1)};
    scalar = losses.mean();
  } else {
    detail::require(!loss_.gt.empty(), "--kind " + loss_.kind + " needs --gt");
    const GrayImage raw = read_gray_png(loss_.gt);
    detail::require(raw.bit_depth == 8, loss_.gt + ": unsupported bit depth");
    std::vector<std::uint8_t> labels(raw.pixels.begin(), raw.pixels.end());
    for (auto& v : labels)
      if (v == ignore) v = kIgnoreId;
    const ClassMap gt(raw.height, raw.width, static_cast<int>(logits.channels()), std::move(labels));
    if (loss_.kind == "focal") {
      FocalConfig fc{json_get(cfg, "alpha", 1.0), json_get(cfg, "gamma", 0.0)};
      losses = pixel_focal(logits, gt, fc);
      scalar = losses.mean();
    } else {
      losses = pixel_ce(logits, gt);
      scalar = losses.mean();
      if (loss_.kind == "ohem") {
        OhemConfig oc{json_get(cfg, "threshold", 0.0), json_get<std::size_t>(cfg, "min_kept", 0),
                      kIgnoreId};
        scalar = ohem_select(losses, oc).loss;
      }
    }
  }
  out << "loss " << format_number(scalar) << "\n";
  if (loss_.out_map.empty()) return {};
  write_uqt1(loss_.out_map, to_tensor(losses.values));
  return {loss_.out_map};
}

Produced Cli::run_sample_plan(std::ostream& out) {
  const auto first = sample_.freqs.find_first_not_of(" \t");
  const bool inline_json = first != std::string::npos &&
                           (sample_.freqs[first] == '[' || sample_.freqs[first] == '{');
  json j;
  if (inline_json) {
    try {
      j = json::parse(sample_.freqs);
    } catch (const json::exception& e) {
      throw DataError(std::string("--freqs: ") + e.what());
    }
  } else {
    j = read_json(sample_.freqs);
  }
  ClassFrequencies f;
  try {
    f.f = j.is_array() ? j.get<std::vector<double>>() : j.at("f").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw DataError(sample_.freqs + ": expected an array of frequencies: " + e.what());
  }
  const auto p = sampling_probability(f, sample_.bias);
  out << json(p).dump() << "\n";
  return {};
}

Produced Cli::run_conf_filter() {
  const ConfidenceMap conf = load_confidence(filter_.conf);
  const ClassMap pred = load_class_map(filter_.pred, num_classes_);
  save_mask(filter_.out, confidence_filter(conf, pred, filter_.top_k));
  return {filter_.out};
}

/// Restores the working directory on scope exit.
class ScopedCwd {
 public:
  explicit ScopedCwd(const fs::path& dir) : saved_(fs::current_path()) {
    if (!dir.empty()) fs::current_path(dir);
  }
  ~ScopedCwd() {
    std::error_code ec;
    fs::current_path(saved_, ec);
  }
  ScopedCwd(const ScopedCwd&) = delete;
  ScopedCwd& operator=(const ScopedCwd&) = delete;

 private:
  fs::path saved_;
};

Produced Cli::run_pipeline(std::ostream& out, std::ostream& err) {
  const fs::path config = fs::absolute(pipeline_.config);
  const json j = read_json(config);
  if (!j.contains("steps") || !j["steps"].is_array())
    throw DataError("pipeline config needs a 'steps' array");

  struct Step {
    std::string name;
    std::vector<std::string> args;
  };
  std::vector<Step> steps;
  for (const auto& s : j["steps"]) {
    Step step{json_get(s, "name", std::string{}), json_get(s, "args", std::vector<std::string>{})};
    if (step.name == "pipeline") throw DataError("pipelines cannot nest");
    steps.push_back(std::move(step));
  }
  // Validate every step before running any of them.
  for (std::size_t i = 0; i < steps.size(); ++i) {
    Cli probe;
    std::vector<std::string> argv{steps[i].name};
    argv.insert(argv.end(), steps[i].args.begin(), steps[i].args.end());
    try {
      probe.parse(argv);
    } catch (const CLI::ParseError& e) {
      throw DataError("pipeline step " + std::to_string(i) + " '" + steps[i].name +
                      "': " + e.what());
    }
    if (probe.selected() != steps[i].name)
      throw DataError("pipeline step " + std::to_string(i) + ": unknown step '" + steps[i].name + "'");
  }

  Produced all;
  {
    ScopedCwd cwd(config.parent_path());
    for (std::size_t i = 0; i < steps.size(); ++i) {
      Cli step;
      std::vector<std::string> argv{steps[i].name};
      argv.insert(argv.end(), steps[i].args.begin(), steps[i].args.end());
      step.parse(argv);
      try {
        for (auto& p : step.execute(out, err))
          all.push_back(fs::absolute(p).lexically_normal());
      } catch (const DataError& e) {
        throw DataError("pipeline step " + std::to_string(i) + " '" + steps[i].name +
                        "' failed: " + e.what());
      } catch (const std::exception& e) {
        throw Error("pipeline step " + std::to_string(i) + " '" + steps[i].name +
                    "' failed: " + e.what());
      }
    }
  }
  const fs::path produced_path =
      pipeline_.produced.empty() ? config.parent_path() / (config.stem().string() + ".produced.json")
                                 : fs::path(pipeline_.produced);
  json list = json::array();
  for (const auto& p : all) list.push_back(p.lexically_relative(config.parent_path()).generic_string());
  write_text(produced_path, json{{"produced", list}}.dump(2) + "\n");
  all.push_back(produced_path);
  return all;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Cli cli;
  try {
    cli.parse(args);
  } catch (const CLI::CallForHelp& e) {
    out << cli.app().help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << cli.app().help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    // Subcommand --help surfaces as CallForHelp from the subcommand's parse.
    err << e.what() << "\n";
    return kExitUsage;
  }
  try {
    cli.execute(out, err);
    return kExitOk;
  } catch (const DataError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
}

}  // namespace uqseg::cli
