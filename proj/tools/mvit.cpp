// Command-line front end: shape traces, cost tables, the property suite,
// and attention micro-benchmarks on synthetic inputs.

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mvit/cost.hpp"
#include "mvit/init.hpp"
#include "mvit/model.hpp"
#include "mvit/verify.hpp"

namespace {

using namespace mvit;
using nlohmann::json;

struct CommonOpts {
  std::string variant = "T";
  std::string task = "classify";
  std::string input;  // H[xW[xT]]
  uint64_t seed = 0;
  std::string out;
  std::string format = "json";
  std::string relpos;  // none|abs|joint|decomposed
  std::string attn;    // full|window|swin|hwin|pooling
  int64_t kv_stride = 0;
  std::string config_path;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--variant", o.variant, "Model variant: T, S, B, L or H");
  cmd->add_option("--task", o.task, "Task: classify, detect or video");
  cmd->add_option("--input", o.input, "Input size H[xW[xT]]");
  cmd->add_option("--seed", o.seed, "Seed for all synthetic inputs");
  cmd->add_option("--out", o.out, "Output file (stdout when omitted)");
  cmd->add_option("--format", o.format, "Output format: json or csv")
      ->check(CLI::IsMember({"json", "csv"}));
  cmd->add_option("--relpos", o.relpos, "Positional mode: none, abs, joint, decomposed")
      ->check(CLI::IsMember({"none", "abs", "joint", "decomposed"}));
  cmd->add_option("--attn", o.attn, "Attention schedule: full, window, swin, hwin, pooling")
      ->check(CLI::IsMember({"full", "window", "swin", "hwin", "pooling"}));
  cmd->add_option("--kv-stride", o.kv_stride, "Stage-1 K/V pooling stride");
  cmd->add_option("--config", o.config_path, "Model config JSON (flags win on conflict)");
}

Grid parse_input(const std::string& text, bool video) {
  std::vector<int64_t> parts;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, 'x')) parts.push_back(std::stoll(tok));
  if (parts.empty() || parts.size() > 3) throw CLI::ValidationError("--input", "expected H[xW[xT]]");
  const int64_t H = parts[0];
  const int64_t W = parts.size() >= 2 ? parts[1] : H;
  if (parts.size() == 3) return {parts[2], H, W};  // T last on the flag, first internally
  if (video) return {16, H, W};
  return {H, W};
}

ModelConfig build_config(const CommonOpts& o) {
  ModelConfig cfg;
  if (!o.config_path.empty()) {
    std::ifstream f(o.config_path);
    if (!f) throw std::runtime_error("cannot open " + o.config_path);
    cfg = ModelConfig::from_json(json::parse(f));
    if (!o.input.empty()) cfg.input = parse_input(o.input, cfg.task == "video");
  } else {
    const bool video = o.task == "video";
    const Grid input = parse_input(o.input.empty() ? "224" : o.input, video);
    cfg = make_variant(o.variant, o.task, input);
  }
  if (!o.relpos.empty()) {
    if (o.relpos == "none") cfg.relpos = RelPosMode::none;
    else if (o.relpos == "abs") cfg.relpos = RelPosMode::absolute_only;
    else if (o.relpos == "joint") cfg.relpos = RelPosMode::joint;
    else cfg.relpos = RelPosMode::decomposed;
  }
  if (!o.attn.empty()) cfg.attn_mode = o.attn;
  if (o.kv_stride > 0) cfg.kv_stride_base = o.kv_stride;
  return cfg;
}

void emit(const CommonOpts& o, const std::string& text) {
  if (o.out.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(o.out, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + o.out);
  f << text;
}

std::string grid_str(const Grid& g) {
  std::string s;
  for (size_t i = 0; i < g.size(); ++i) s += (i ? "x" : "") + std::to_string(g[i]);
  return s;
}

int cmd_trace(const CommonOpts& o) {
  const ModelConfig cfg = build_config(o);
  const ModelPlan plan = plan_blocks(cfg);
  const CostReport cost = count_cost(cfg);
  if (o.format == "csv") {
    std::ostringstream os;
    os << "stage,block,kind,grid_in,grid_out,channels,heads,window,l_q,l_k\n";
    for (size_t i = 0; i < plan.blocks.size(); ++i) {
      const BlockPlan& b = plan.blocks[i];
      os << b.stage << "," << b.block << "," << to_string(b.attn.kind) << ","
         << grid_str(b.grid_in) << "," << grid_str(b.grid_out) << "," << b.d_out << ","
         << b.attn.heads << "," << (b.attn.windowed() ? grid_str(b.attn.window) : "") << ","
         << cost.blocks[i].l_q << "," << cost.blocks[i].l_k << "\n";
    }
    emit(o, os.str());
  } else {
    json rows = json::array();
    for (size_t i = 0; i < plan.blocks.size(); ++i) {
      const BlockPlan& b = plan.blocks[i];
      rows.push_back({{"stage", b.stage},
                      {"block", b.block},
                      {"kind", to_string(b.attn.kind)},
                      {"grid_in", b.grid_in},
                      {"grid_out", b.grid_out},
                      {"channels", b.d_out},
                      {"heads", b.attn.heads},
                      {"window", b.attn.windowed() ? b.attn.window : Grid{}},
                      {"l_q", cost.blocks[i].l_q},
                      {"l_k", cost.blocks[i].l_k}});
    }
    json out{{"schema", "mvit-trace/1"},
             {"stem_grid", plan.stem_grid},
             {"stage_grids", plan.stage_grids},
             {"blocks", rows}};
    emit(o, out.dump(2) + "\n");
  }
  return 0;
}

int cmd_cost(const CommonOpts& o) {
  const CostReport rep = count_cost(build_config(o));
  emit(o, o.format == "csv" ? rep.to_csv() : rep.to_json().dump(2) + "\n");
  return 0;
}

int cmd_verify(const CommonOpts& o, bool quick, bool fault) {
  VerifyOptions vo;
  vo.quick = quick;
  vo.seed = o.seed;
  vo.fault_injection = fault;
  const VerifyResult res = run_verify(vo);
  std::cout << res.to_text();
  if (!o.out.empty()) {
    if (o.format == "csv") {
      std::ostringstream os;
      os << "property,passed,detail\n";
      for (const VerifyLine& l : res.lines)
        os << l.name << "," << (l.passed ? "1" : "0") << "," << l.detail << "\n";
      emit(o, os.str());
    } else {
      json lines = json::array();
      for (const VerifyLine& l : res.lines)
        lines.push_back({{"name", l.name}, {"passed", l.passed}, {"detail", l.detail}});
      json out{{"schema", "mvit-verify/1"},
               {"seed", o.seed},
               {"quick", quick},
               {"all_passed", res.all_passed()},
               {"properties", lines}};
      emit(o, out.dump(2) + "\n");
    }
  }
  return res.all_passed() ? 0 : 1;
}

int cmd_bench(const CommonOpts& o, int trials) {
  // --input names the token grid here (attention operates on tokens).
  const Grid grid = parse_input(o.input.empty() ? "56" : o.input, false);
  const int64_t L = [&] {
    int64_t n = 1;
    for (int64_t e : grid) n *= e;
    return n;
  }();
  const int64_t d_in = 96, heads = 1, head_dim = 96;
  const int64_t kv = o.kv_stride > 0 ? o.kv_stride : 4;

  struct Case { std::string name; AttentionSpec spec; };
  std::vector<Case> cases;
  {
    AttentionSpec s;
    s.heads = heads;
    s.head_dim = head_dim;
    s.q_stride.assign(grid.size(), 1);
    s.kv_stride.assign(grid.size(), 1);
    s.kind = AttnKind::full;
    cases.push_back({"full", s});
    s.kind = AttnKind::pooling;
    s.kv_stride.assign(grid.size(), kv);
    cases.push_back({"pooling", s});
    s.kind = AttnKind::fixed_window;
    s.kv_stride.assign(grid.size(), 1);
    s.window.assign(grid.size(), 7);
    for (size_t a = 0; a < grid.size(); ++a) s.window[a] = std::min<int64_t>(7, grid[a]);
    cases.push_back({"window", s});
    s.kind = AttnKind::shifted_window;
    s.shift.assign(grid.size(), 0);
    for (size_t a = 0; a < grid.size(); ++a) s.shift[a] = s.window[a] / 2;
    cases.push_back({"swin", s});
  }

  json rows = json::array();
  std::ostringstream csv;
  csv << "kind,l,median_seconds,tokens_per_second,score_bytes\n";
  for (const Case& c : cases) {
    Rng rng(o.seed);
    AttentionParams params = make_attention_params(c.spec, d_in, grid, rng);
    Tensor x = rng.normal_tensor({L, d_in});
    std::vector<double> times;
    for (int t = 0; t < std::max(5, trials); ++t) {
      Ctx plain;
      const auto t0 = std::chrono::steady_clock::now();
      attention(plain, x, grid, params, c.spec);
      const auto t1 = std::chrono::steady_clock::now();
      times.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    std::sort(times.begin(), times.end());
    const double median = times[times.size() / 2];
    const long long bytes = attention_memory_estimate(c.spec, grid);
    rows.push_back({{"kind", c.name},
                    {"l", L},
                    {"median_seconds", median},
                    {"tokens_per_second", median > 0 ? static_cast<double>(L) / median : 0.0},
                    {"score_bytes", bytes}});
    csv << c.name << "," << L << "," << median << ","
        << (median > 0 ? static_cast<double>(L) / median : 0.0) << "," << bytes << "\n";
  }
  if (o.format == "csv") {
    emit(o, csv.str());
  } else {
    emit(o, json{{"schema", "mvit-bench/1"}, {"grid", grid}, {"cases", rows}}.dump(2) + "\n");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multiscale attention mechanics toolkit"};
  app.require_subcommand(1);

  CommonOpts ot, oc, ov, ob;
  bool quick = false, fault = false;
  int trials = 5;
  CLI::App* trace = app.add_subcommand("trace", "Per-block shape trace");
  add_common(trace, ot);
  CLI::App* cost = app.add_subcommand("cost", "Analytic parameter/flop report");
  add_common(cost, oc);
  CLI::App* verify = app.add_subcommand("verify", "Run the property suite");
  add_common(verify, ov);
  verify->add_flag("--quick", quick, "Subset to L <= 64 cases");
  verify->add_flag("--fault", fault, "Test hook: inject a fault; the suite must fail");
  CLI::App* bench = app.add_subcommand("bench", "Micro-benchmark attention kinds");
  add_common(bench, ob);
  bench->add_option("--trials", trials, "Trials per kind (>= 5)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (trace->parsed()) return cmd_trace(ot);
    if (cost->parsed()) return cmd_cost(oc);
    if (verify->parsed()) return cmd_verify(ov, quick, fault);
    if (bench->parsed()) return cmd_bench(ob, trials);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
