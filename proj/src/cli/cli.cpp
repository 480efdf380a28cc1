#include "tformer/cli.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "tformer/cost.hpp"
#include "tformer/gradcheck.hpp"
#include "tformer/training.hpp"

namespace tformer {

using nlohmann::json;

std::vector<ReferenceModel> classification_references() {
  return {{"ResNet18", 12'000'000}, {"ResNet50", 26'000'000}, {"ResNet101", 60'000'000}};
}

// ---------------------------------------------------------------------------
// PPM

namespace {

class PpmHeader {
 public:
  explicit PpmHeader(std::span<const std::uint8_t> b) : b_(b) {}

  std::size_t number(const char* what) {
    skip_space();
    std::size_t v = 0, digits = 0;
    while (pos_ < b_.size() && std::isdigit(b_[pos_])) {
      v = v * 10 + (b_[pos_++] - '0');
      if (++digits > 9) throw std::runtime_error(std::string("PPM: ") + what + " too large");
    }
    if (digits == 0) throw std::runtime_error(std::string("PPM: expected ") + what);
    return v;
  }
  std::size_t end_of_header() {
    if (pos_ >= b_.size() || !std::isspace(b_[pos_])) {
      throw std::runtime_error("PPM: expected one whitespace byte before pixel data");
    }
    return pos_ + 1;
  }

 private:
  void skip_space() {
    while (pos_ < b_.size()) {
      if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (std::isspace(b_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 2;
};

}  // namespace

Image read_ppm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
    throw std::runtime_error("PPM: only binary P6 images are supported");
  }
  PpmHeader h(bytes);
  Image img;
  img.width = h.number("width");
  img.height = h.number("height");
  const std::size_t maxval = h.number("maxval");
  if (img.width == 0 || img.height == 0) throw std::runtime_error("PPM: empty image");
  if (maxval == 0 || maxval > 255) throw std::runtime_error("PPM: only 8-bit maxval is supported");
  const std::size_t start = h.end_of_header();
  const std::size_t need = img.width * img.height * 3;
  if (bytes.size() - start < need) throw std::runtime_error("PPM: pixel data truncated");
  img.rgb.assign(bytes.begin() + start, bytes.begin() + start + need);
  if (maxval != 255) {
    for (auto& v : img.rgb) v = static_cast<std::uint8_t>(std::min<std::size_t>(v, maxval) * 255 / maxval);
  }
  return img;
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  return read_ppm(bytes);
}

void write_ppm(const Image& image, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.rgb.data()),
            static_cast<std::streamsize>(image.rgb.size()));
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

TensorF image_to_tensor(const Image& image, std::size_t side) {
  TensorF t({1, 3, side, side});
  for (std::size_t y = 0; y < side; ++y) {
    const std::size_t sy = y * image.height / side;
    for (std::size_t x = 0; x < side; ++x) {
      const std::size_t sx = x * image.width / side;
      for (std::size_t c = 0; c < 3; ++c) {
        t.at(0, c, y, x) = static_cast<float>(image.rgb[(sy * image.width + sx) * 3 + c]) / 255.0f;
      }
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Subcommands

namespace {

bool structured(const std::string& format) { return format == "structured" || format == "json"; }

std::pair<std::size_t, std::size_t> parse_hw(const std::string& s) {
  const auto x = s.find_first_of("xX");
  try {
    if (x == std::string::npos) {
      const std::size_t v = std::stoul(s);
      return {v, v};
    }
    return {std::stoul(s.substr(0, x)), std::stoul(s.substr(x + 1))};
  } catch (const std::logic_error&) {
    throw ConfigError("--input expects HxW, got '" + s + "'");
  }
}

std::size_t default_classes(Variant v) { return v == Variant::Micro ? kToyClasses : 1000; }

struct Options {
  std::string format = "table";
  // summarize / export
  std::string variant = "s";
  std::string input;
  std::size_t classes = 0;
  bool no_bias = false;
  // compare
  std::uint64_t d = 64, n = 3136, heads = 8;
  bool bias = false;
  // gradcheck / train-demo / export
  std::uint64_t seed = 0;
  std::size_t steps = 500;
  double lr = kDemoLearningRate;
  std::size_t batch = 32;
  std::size_t samples = 256;
  std::string save;
  // export / import-check / infer
  std::string out_path;
  std::string dtype = "f32";
  std::string archive;
  std::string weights;
  std::string image;
  std::size_t top = 3;
};

int cmd_summarize(const Options& o, std::ostream& out) {
  const Variant v = parse_variant(o.variant);
  TFormerConfig cfg = make_config(v, o.classes ? o.classes : default_classes(v));
  if (o.no_bias) cfg.bias = false;
  auto [h, w] = o.input.empty() ? std::pair{cfg.image_size, cfg.image_size} : parse_hw(o.input);
  const CostReport report = model_cost(cfg, h, w);
  if (structured(o.format)) {
    out << to_json(report) << '\n';
  } else {
    out << "# TFormer-" << cfg.variant << " @ " << h << "x" << w << '\n' << format_table(report);
  }
  return kExitOk;
}

int cmd_compare(const Options& o, std::ostream& out) {
  const MHACostSpec spec{o.n, o.d, o.heads};
  const NLModuleConfig nl;
  const MHACost m = mha_cost(spec);
  const LayerCost h = hybrid_cost(o.d, o.n, nl, o.bias);
  const CostRatios r = ratios(spec, nl, o.bias);
  if (structured(o.format)) {
    const json j{
        {"rows",
         {{{"component", "mha"},
           {"params", m.params},
           {"madds", m.madds_corrected},
           {"madds_literal", m.madds_literal}},
          {{"component", "hybrid"}, {"params", h.params}, {"madds", h.madds}}}},
        {"ratios", {{"R_P", r.params}, {"R_F", r.madds}}}};
    out << j.dump(2) << '\n';
    return kExitOk;
  }
  out << "# D=" << o.d << " N=" << o.n << " heads=" << o.heads << '\n'
      << std::left << std::setw(10) << "component" << std::right << std::setw(14) << "params"
      << std::setw(18) << "madds" << '\n'
      << std::left << std::setw(10) << "mha" << std::right << std::setw(14) << m.params
      << std::setw(18) << m.madds_corrected << '\n'
      << std::left << std::setw(10) << "hybrid" << std::right << std::setw(14) << h.params
      << std::setw(18) << h.madds << '\n'
      << "# mha madds in the literal per-head form: " << m.madds_literal << '\n'
      << std::fixed << std::setprecision(2) << "R_P = " << r.params << '\n'
      << "R_F = " << r.madds << '\n'
      << "# N^2/D^2 = " << static_cast<double>(o.n * o.n) / static_cast<double>(o.d * o.d) << '\n';
  return kExitOk;
}

int cmd_gradcheck(const Options& o, std::ostream& out) {
  const auto results = gradcheck_suite(o.seed);
  const bool ok = std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed(); });
  if (structured(o.format)) {
    json rows = json::array();
    for (const auto& r : results) {
      rows.push_back({{"component", r.name},
                      {"max_rel_error", r.max_rel_error},
                      {"threshold", r.threshold},
                      {"coordinates", r.coordinates},
                      {"passed", r.passed()}});
    }
    out << json{{"rows", rows}, {"passed", ok}}.dump(2) << '\n';
  } else {
    for (const auto& r : results) {
      out << std::left << std::setw(16) << r.name << std::right << std::scientific
          << std::setprecision(3) << std::setw(12) << r.max_rel_error << "  <= " << r.threshold
          << "  n=" << r.coordinates << "  " << (r.passed() ? "PASS" : "FAIL") << '\n';
    }
    out << (ok ? "all gradient checks passed\n" : "gradient check FAILED\n");
  }
  return ok ? kExitOk : kExitCheckFailed;
}

int cmd_train_demo(const Options& o, std::ostream& out) {
  TrainDemoConfig cfg;
  cfg.seed = o.seed;
  cfg.samples = o.samples;
  cfg.sgd.lr = o.lr;
  cfg.sgd.steps = o.steps;
  cfg.sgd.batch_size = o.batch;
  TFormerModel<float> model;
  const TrainHistory hist = train_demo(cfg, &model);
  const double window = window_decrease_fraction(hist.loss);
  const bool ok = hist.final_accuracy >= 0.95;
  if (!o.save.empty()) export_archive(model, std::filesystem::path(o.save));
  if (structured(o.format)) {
    json acc = json::array();
    for (std::size_t i = 0; i < hist.accuracy.size(); ++i) {
      acc.push_back({{"step", hist.accuracy_step[i]}, {"accuracy", hist.accuracy[i]}});
    }
    out << json{{"accuracy", acc},
                {"loss", hist.loss},
                {"final_accuracy", hist.final_accuracy},
                {"window_decrease_fraction", window}}
               .dump(2)
        << '\n';
  } else {
    out << std::fixed << std::setprecision(4);
    for (std::size_t i = 0; i < hist.accuracy.size(); ++i) {
      const std::size_t step = hist.accuracy_step[i];
      out << "step " << std::setw(5) << step << "  accuracy " << hist.accuracy[i];
      if (step > 0) out << "  loss " << hist.loss[step - 1];
      out << '\n';
    }
    out << "final_accuracy " << hist.final_accuracy << '\n'
        << "window_decrease_fraction " << window << '\n';
  }
  return ok ? kExitOk : kExitCheckFailed;
}

template <Real T>
int export_typed(const TFormerConfig& cfg, const Options& o, std::ostream& out) {
  Rng rng(o.seed);
  const auto model = TFormerModel<T>::build(cfg, &rng);
  const std::size_t written = export_archive(model, std::filesystem::path(o.out_path));
  const auto refs = classification_references();
  const TransmissionReport report = payload_report(model, refs);
  if (structured(o.format)) {
    out << to_json(report) << '\n';
  } else {
    out << "wrote " << written << " bytes to " << o.out_path << '\n' << format_table(report);
  }
  return kExitOk;
}

int cmd_export(const Options& o, std::ostream& out) {
  const Variant v = parse_variant(o.variant);
  TFormerConfig cfg = make_config(v, o.classes ? o.classes : default_classes(v));
  if (o.no_bias) cfg.bias = false;
  return o.dtype == "f64" ? export_typed<double>(cfg, o, out) : export_typed<float>(cfg, o, out);
}

int cmd_import_check(const Options& o, std::ostream& out) {
  const auto bytes = read_file(o.archive);
  const ArchiveInfo info = inspect_archive(bytes);
  std::vector<std::uint8_t> again;
  std::size_t params = 0;
  if (info.dtype == DType::f64) {
    const auto m = import_archive<double>(bytes);
    again = export_archive(m);
    params = m.count_parameters().total;
  } else {
    const auto m = import_archive<float>(bytes);
    again = export_archive(m);
    params = m.count_parameters().total;
  }
  const bool identical = again.size() == bytes.size() && std::equal(again.begin(), again.end(), bytes.begin());
  out << "variant " << info.config.variant << '\n'
      << "dtype " << (info.dtype == DType::f64 ? "f64" : "f32") << '\n'
      << "tensors " << info.tensor_count << '\n'
      << "parameters " << params << '\n'
      << "bytes " << info.bytes << " (expected " << archive_size(info.config, info.dtype) << ")\n"
      << "checksum ok\n"
      << "re-export " << (identical ? "identical" : "DIFFERS") << '\n';
  return identical ? kExitOk : kExitCheckFailed;
}

template <Real T>
Tensor<T> infer_logits(std::span<const std::uint8_t> bytes, const Image& img) {
  const auto model = import_archive<T>(bytes);
  return model.forward(image_to_tensor(img, model.config().image_size).template cast<T>());
}

int cmd_infer(const Options& o, std::ostream& out) {
  const auto bytes = read_file(o.weights);
  const ArchiveInfo info = inspect_archive(bytes);
  const Image img = read_ppm(std::filesystem::path(o.image));
  const TensorD logits = info.dtype == DType::f64
                             ? infer_logits<double>(bytes, img)
                             : infer_logits<float>(bytes, img).template cast<double>();
  const TensorD probs = softmax_last(logits);
  std::vector<std::size_t> order(probs.numel());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t k = std::min(o.top, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      return probs[a] > probs[b] || (probs[a] == probs[b] && a < b);
                    });
  if (structured(o.format)) {
    json top = json::array();
    for (std::size_t i = 0; i < k; ++i) top.push_back({{"class", order[i]}, {"score", probs[order[i]]}});
    out << json{{"top", top}}.dump(2) << '\n';
  } else {
    out << std::fixed << std::setprecision(6);
    for (std::size_t i = 0; i < k; ++i) {
      out << i + 1 << "  class " << order[i] << "  score " << probs[order[i]] << '\n';
    }
  }
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"TFormer reference implementation", "tformer"};
  app.require_subcommand(1);
  Options o;
  const std::vector<std::string> formats{"table", "structured", "json"};
  auto add_format = [&](CLI::App* sub) {
    sub->add_option("--format", o.format, "table or structured (json)")
        ->check(CLI::IsMember(formats));
  };
  const std::vector<std::string> variants{"s", "m", "l", "micro"};

  auto* summarize = app.add_subcommand("summarize", "Per-layer parameter and madd report");
  summarize->add_option("--variant", o.variant, "s, m, l or micro")
      ->check(CLI::IsMember(variants, CLI::ignore_case));
  summarize->add_option("--input", o.input, "input size HxW (default: the variant's image size)");
  summarize->add_option("--classes", o.classes, "classifier width (default 1000, micro 4)");
  summarize->add_flag("--no-bias", o.no_bias, "drop bias terms");
  add_format(summarize);

  auto* compare = app.add_subcommand("compare", "MHA versus hybrid layer cost and ratios");
  compare->add_option("--d", o.d, "embedding dim")->check(CLI::PositiveNumber);
  compare->add_option("--n", o.n, "token count")->check(CLI::PositiveNumber);
  compare->add_option("--heads", o.heads, "attention heads")->check(CLI::PositiveNumber);
  compare->add_flag("--bias", o.bias, "count the pointwise bias of the hybrid layer");
  add_format(compare);

  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every VJP");
  gradcheck_cmd->add_option("--seed", o.seed);
  add_format(gradcheck_cmd);

  auto* train = app.add_subcommand("train-demo", "Train Micro on the synthetic set");
  train->add_option("--seed", o.seed);
  train->add_option("--steps", o.steps)->check(CLI::PositiveNumber);
  train->add_option("--lr", o.lr)->check(CLI::PositiveNumber);
  train->add_option("--batch", o.batch)->check(CLI::PositiveNumber);
  train->add_option("--samples", o.samples)->check(CLI::PositiveNumber);
  train->add_option("--save", o.save, "write the trained weights to this archive");
  add_format(train);

  auto* exp = app.add_subcommand("export", "Write freshly initialized weights to an archive");
  exp->add_option("--variant", o.variant)->check(CLI::IsMember(variants, CLI::ignore_case));
  exp->add_option("--out", o.out_path)->required();
  exp->add_option("--seed", o.seed);
  exp->add_option("--dtype", o.dtype)->check(CLI::IsMember({"f32", "f64"}));
  exp->add_option("--classes", o.classes);
  exp->add_flag("--no-bias", o.no_bias);
  add_format(exp);

  auto* imp = app.add_subcommand("import-check", "Validate an archive and re-export it");
  imp->add_option("archive", o.archive)->required();

  auto* infer = app.add_subcommand("infer", "Classify a PPM image");
  infer->add_option("--weights", o.weights)->required();
  infer->add_option("--image", o.image)->required();
  infer->add_option("--top", o.top)->check(CLI::PositiveNumber);
  add_format(infer);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*summarize) return cmd_summarize(o, out);
    if (*compare) return cmd_compare(o, out);
    if (*gradcheck_cmd) return cmd_gradcheck(o, out);
    if (*train) return cmd_train_demo(o, out);
    if (*exp) return cmd_export(o, out);
    if (*imp) return cmd_import_check(o, out);
    if (*infer) return cmd_infer(o, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << '\n';
    return kExitCheckFailed;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitIO;
  }
  return kExitUsage;
}

}  // namespace tformer
