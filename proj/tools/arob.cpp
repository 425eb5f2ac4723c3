// arob: command-line driver for the attribution robustness pipeline.

#include <iostream>

#include "CLI11.hpp"

#include "arob/io/pgm.hpp"
#include "arob/pipeline.hpp"

namespace {

using namespace arob;
namespace fs = std::filesystem;

struct Common {
  std::string config;
  std::string out;
  std::size_t runs = 0;
  std::string method = "all";
  std::string group;
  std::size_t top_k = 0;
};

io::ExperimentConfig load(const Common& c) {
  io::ExperimentConfig cfg = c.config.empty() ? io::ExperimentConfig{} : io::load_config(c.config);
  if (!c.out.empty()) cfg.output_dir = c.out;
  if (c.top_k > 0) cfg.top_k = c.top_k;
  return cfg;
}

std::vector<Method> methods_of(const std::string& s) {
  if (s == "all") return {std::begin(kAllMethods), std::end(kAllMethods)};
  return {parse_method(s)};
}

std::vector<Group> groups_of(const std::string& s) {
  if (s.empty()) return {Group::tp, Group::tn};
  return {parse_group(s)};
}

void log_line(const std::string& s) { std::cerr << s << "\n"; }

std::string one_line(std::string s) {
  for (char& ch : s)
    if (ch == '\n' || ch == '\r') ch = ' ';
  return s;
}

int fail(const char* kind, int code, const std::string& msg) {
  std::cerr << "arob: error kind=" << kind << " exit=" << code << ": " << one_line(msg) << "\n";
  return code;
}

Tensor<float> read_any_volume(const fs::path& p) {
  io::AnyTensor any = io::looks_like_nifti(p) ? io::import_nifti(p) : io::read_container(p);
  Tensor<float> v = std::visit([](auto& t) { return t.template cast<float>(); }, any);
  if (v.rank() == 4 && v.extent(0) == 1) v = v.reshaped({v.extent(1), v.extent(2), v.extent(3)});
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"arob - attribution robustness benchmark on a synthetic volumetric cohort"};
  app.require_subcommand(1);
  Common c;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", c.config, "experiment config (JSON); defaults apply when omitted")
        ->check(CLI::ExistingFile);
    sub->add_option("--out", c.out, "output directory (overrides config output_dir)");
  };

  auto* gen = app.add_subcommand("gen-data", "generate the phantom cohort, atlas and subject-wise split");
  add_common(gen);

  auto* train = app.add_subcommand("train", "train runs 0..N-1; writes checkpoints, metrics.csv, predictions.csv");
  add_common(train);
  train->add_option("--runs", c.runs, "number of runs (default: train.repetitions)");

  auto* attr = app.add_subcommand("attribute", "heatmaps for correctly classified test samples");
  add_common(attr);
  attr->add_option("--runs", c.runs, "use only the first N runs");
  attr->add_option("--method", c.method, "gxi, gbp, lrp, occ or all")
      ->check(CLI::IsMember({"gxi", "gbp", "lrp", "occ", "all"}));
  attr->add_option("--group", c.group, "tp or tn (default both)")->check(CLI::IsMember({"tp", "tn"}));

  auto* eval = app.add_subcommand(
      "evaluate",
      "mean heatmaps, region tables and pairwise matrices\n"
      "  regions_run_<i>.csv: region,name,voxels,sum,density,gain,rank_sum,rank_density,rank_gain");
  add_common(eval);
  eval->add_option("--runs", c.runs, "use only the first N runs");
  eval->add_option("--method", c.method, "gxi, gbp, lrp, occ or all")
      ->check(CLI::IsMember({"gxi", "gbp", "lrp", "occ", "all"}));
  eval->add_option("--top-k", c.top_k, "regions compared per run (default 10)");

  auto* rep = app.add_subcommand(
      "report",
      "coherence report\n"
      "  report.csv: method,l2_tp,l2_tn,coherence_sum_pct,coherence_density_pct,coherence_gain_pct");
  add_common(rep);
  rep->add_option("--runs", c.runs, "use only the first N runs");
  rep->add_option("--method", c.method, "gxi, gbp, lrp, occ or all")
      ->check(CLI::IsMember({"gxi", "gbp", "lrp", "occ", "all"}));
  rep->add_option("--top-k", c.top_k, "regions compared per run (default 10)");

  std::string slice_in, slice_out;
  auto* slice = app.add_subcommand("slice", "write axial/coronal/sagittal mid-plane PGM images of a volume");
  slice->add_option("input", slice_in, "volume container (.arob) or NIfTI-1 (.nii)")->required();
  slice->add_option("--out", slice_out, "output stem (default: input path without extension)");

  std::string conv_in, conv_out;
  auto* convert = app.add_subcommand("convert", "convert between the volume container and NIfTI-1 (by extension)");
  convert->add_option("input", conv_in)->required();
  convert->add_option("output", conv_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", 1, e.what());
  }

  try {
    if (*slice) {
      const fs::path in(slice_in);
      fs::path stem = slice_out.empty() ? in.parent_path() / in.stem() : fs::path(slice_out);
      for (const auto& p : io::write_mid_planes(stem, read_any_volume(in))) std::cout << p.string() << "\n";
      return 0;
    }
    if (*convert) {
      const fs::path in(conv_in), out(conv_out);
      io::AnyTensor any = io::looks_like_nifti(in) ? io::import_nifti(in) : io::read_container(in);
      std::visit(
          [&](auto& t) {
            if (io::looks_like_nifti(out)) {
              auto v = t.rank() == 4 && t.extent(0) == 1 ? t.reshaped({t.extent(1), t.extent(2), t.extent(3)}) : t;
              io::export_nifti(out, v);
            } else {
              io::write_container(out, t);
            }
          },
          any);
      return 0;
    }

    const io::ExperimentConfig cfg = load(c);
    const pipeline::Layout layout{cfg.output_dir};
    if (*gen) {
      fs::create_directories(layout.root);
      io::write_text_atomic(layout.root / "config.json", io::config_to_json(cfg).dump(2) + "\n");
      pipeline::gen_data(cfg, layout, log_line);
    } else if (*train) {
      const auto results = pipeline::train(cfg, layout, c.runs, log_line);
      const auto acc = summarize_accuracy(results);
      std::cout << "balanced accuracy mean " << pipeline::fmt(acc.mean) << " min " << pipeline::fmt(acc.min) << " max "
                << pipeline::fmt(acc.max) << " over " << acc.runs << " runs\n";
      bool all_failed = std::all_of(results.begin(), results.end(), [](const RunResult& r) { return r.failed; });
      if (all_failed) return fail("run", 3, "every training run failed");
    } else if (*attr) {
      const std::size_t n =
          pipeline::attribute(cfg, layout, methods_of(c.method), groups_of(c.group), c.runs, log_line);
      std::cout << n << " heatmaps written\n";
    } else if (*eval) {
      pipeline::evaluate(cfg, layout, methods_of(c.method), c.runs, log_line);
    } else if (*rep) {
      const auto j = pipeline::report(cfg, layout, methods_of(c.method), c.runs);
      std::cout << io::read_text(layout.report_csv());
      (void)j;
    }
    return 0;
  } catch (const Error& e) {
    return fail(to_string(e.kind()), static_cast<int>(e.kind()), e.what());
  } catch (const std::exception& e) {
    return fail("run", 3, e.what());
  }
}
