// ternq: quantize, distill, evaluate and inspect micro transformer models.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "ternq/data.hpp"
#include "ternq/defaults.hpp"
#include "ternq/distill.hpp"
#include "ternq/model.hpp"
#include "ternq/packed.hpp"
#include "ternq/plan.hpp"
#include "ternq/qkernels.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace ternq;

namespace {

enum ExitCode { kOk = 0, kConfigError = 2, kIoError = 3, kNumericalError = 4 };

struct Options {
    std::string plan = "2-2-8";
    std::string method = "twn";
    std::string w_gran = "layer";
    std::string e_gran;
    std::string act = "minmax";
    int stages = 2;
    double lr = defaults::student_lr;
    std::size_t epochs = defaults::student_epochs;
    std::size_t batch = defaults::batch_size;
    std::uint64_t seed = 0;
    std::string out = "runs";
    std::string ablation = "none";
    std::string task = "majority";
    std::string teacher;
    std::string data;
    std::string model;
    std::string in;
    std::string config = "micro";

    std::size_t train_size = defaults::train_size;
    std::size_t eval_size = defaults::eval_size;
    std::size_t seq = defaults::seq_len;
    std::size_t layers = defaults::layers;
    std::size_t hidden = defaults::hidden;
    std::size_t heads = defaults::heads;
    std::size_t ffn = defaults::ffn;
    std::size_t vocab = defaults::vocab;
    std::size_t teacher_epochs = defaults::teacher_epochs;
    double teacher_lr = defaults::teacher_lr;
    bool integer = false;
    std::size_t checkpoint_every = 0;
    std::size_t bins = 16;
    std::size_t m = 64, n = 64, k = 64, reps = 10;
};

std::size_t task_classes(const Options& o) { return parse_task(o.task) == TaskKind::majority ? 4 : 2; }

ModelConfig micro_config(const Options& o) {
    ModelConfig c;
    c.layers = o.layers;
    c.hidden = o.hidden;
    c.heads = o.heads;
    c.ffn = o.ffn;
    c.vocab = o.vocab;
    c.classes = task_classes(o);
    c.max_positions = std::max<std::size_t>(64, o.seq);
    c.validate();
    return c;
}

QuantPlan make_plan(const Options& o) {
    QuantPlan p = QuantPlan::parse(o.plan);
    p.method = parse_method(o.method);
    p.weight_granularity = parse_granularity(o.w_gran);
    if (!o.e_gran.empty()) p.embedding_granularity = parse_granularity(o.e_gran);
    p.act_scheme = parse_act_scheme(o.act);
    p.validate();
    return p;
}

fs::path metrics_dir(const Options& o) {
    if (const char* env = std::getenv("TQ_METRICS_DIR"); env != nullptr && *env != '\0') return env;
    return o.out;
}

void append_line(const fs::path& file, const std::string& line) {
    fs::create_directories(file.parent_path().empty() ? fs::path(".") : file.parent_path());
    std::ofstream os(file, std::ios::app);
    if (!os) throw std::runtime_error("cannot open '" + file.string() + "' for appending");
    os << line << '\n';
}

TaskSpec task_spec(const Options& o) {
    TaskSpec s;
    s.kind = parse_task(o.task);
    s.seq_len = o.seq;
    s.vocab = o.vocab;
    s.classes = task_classes(o);
    return s;
}

Dataset train_data(const Options& o) {
    if (!o.data.empty()) return load_dataset(o.data, task_classes(o));
    return make_dataset(task_spec(o), o.train_size, defaults::train_seed(o.seed));
}

Dataset eval_data(const Options& o) { return make_dataset(task_spec(o), o.eval_size, defaults::eval_seed(o.seed)); }

json size_json(const SizeReport& r) {
    return json{{"plan", r.plan},
                {"total_mb", r.total_mb()},
                {"fp32_mb", r.fp32_mb()},
                {"ratio", r.ratio()},
                {"transformer_bits", r.transformer_bits},
                {"embedding_bits", r.embedding_bits},
                {"unquantized_bits", r.unquantized_bits},
                {"total_bits", r.total_bits}};
}

ModelFile with_meta(ModelFile f, const Options& o, const std::string& kind) {
    f.meta.emplace_back("seed", std::to_string(o.seed));
    f.meta.emplace_back("kind", kind);
    f.meta.emplace_back("task", o.task);
    return f;
}

ModelWeights obtain_teacher(const Options& o, const Dataset& train) {
    if (!o.teacher.empty()) return weights_from_file(load_model(o.teacher));
    TeacherConfig tc;
    tc.epochs = o.teacher_epochs;
    tc.batch_size = o.batch;
    tc.lr = o.teacher_lr;
    tc.seed = o.seed;
    return train_teacher(micro_config(o), train, tc);
}

// ---------------------------------------------------------------------------

int cmd_teacher(const Options& o) {
    const Dataset train = train_data(o);
    const Dataset eval = eval_data(o);
    const fs::path metrics = metrics_dir(o) / "teacher_metrics.jsonl";
    TeacherConfig tc;
    tc.epochs = o.teacher_epochs;
    tc.batch_size = o.batch;
    tc.lr = o.teacher_lr;
    tc.seed = o.seed;
    const ModelWeights w = train_teacher(micro_config(o), train, tc,
                                         [&](const MetricRecord& m) { append_line(metrics, to_jsonl(m, o.seed)); });
    fs::create_directories(o.out);
    const fs::path path = fs::path(o.out) / "teacher.tqm";
    save_model(path, with_meta(to_model_file(w), o, "teacher"));
    const json rec{{"model", path.string()},
                   {"train_acc", evaluate(w, train)},
                   {"eval_acc", evaluate(w, eval)},
                   {"seed", o.seed}};
    std::cout << rec.dump() << '\n';
    return kOk;
}

int cmd_train(const Options& o) {
    const QuantPlan plan = make_plan(o);
    const Dataset train = train_data(o);
    const Dataset eval = eval_data(o);
    const ModelWeights teacher = obtain_teacher(o, train);
    TrainConfig tc;
    tc.plan = plan;
    tc.stages = o.stages;
    tc.epochs = o.epochs;
    tc.batch_size = o.batch;
    tc.lr = o.lr;
    tc.seed = o.seed;
    tc.ablation = parse_ablation(o.ablation);
    tc.checkpoint_every = o.checkpoint_every;
    tc.on_checkpoint = [&](std::size_t step, const QuantizedModel& q) {
        fs::create_directories(o.out);
        save_model(fs::path(o.out) / ("checkpoint_" + std::to_string(step) + ".tqm"), with_meta(to_model_file(q), o, "checkpoint"));
    };
    const fs::path metrics = metrics_dir(o) / "metrics.jsonl";
    const TrainResult r = run_training(teacher, train, &eval, tc,
                                       [&](const MetricRecord& m) { append_line(metrics, to_jsonl(m, o.seed)); });
    fs::create_directories(o.out);
    const fs::path path = fs::path(o.out) / "student.tqm";
    ModelFile f = with_meta(to_model_file(r.student), o, "student");
    f.meta.emplace_back("ablation", o.ablation);
    save_model(path, f);
    const json rec{{"model", path.string()},
                   {"plan", plan.notation()},
                   {"method", to_string(plan.method)},
                   {"ablation", o.ablation},
                   {"teacher_acc", evaluate(teacher, eval)},
                   {"student_acc", evaluate(r.student.effective, eval, plan.activations())},
                   {"steps", r.history.empty() ? 0 : r.history.back().step},
                   {"seed", o.seed}};
    std::cout << rec.dump() << '\n';
    return kOk;
}

int cmd_quantize(const Options& o) {
    if (o.in.empty()) throw std::invalid_argument("quantize: --in checkpoint required");
    const QuantPlan plan = make_plan(o);
    const ModelFile in = load_model(o.in);
    const QuantizedModel q = quantize_model(weights_from_file(in), plan);
    fs::create_directories(o.out);
    const fs::path path = fs::path(o.out) / "quantized.tqm";
    save_model(path, with_meta(to_model_file(q), o, "quantized"));
    json rec = size_json(size_report(in.config, plan));
    rec["model"] = path.string();
    rec["seed"] = o.seed;
    append_line(metrics_dir(o) / "size_report.jsonl", rec.dump());
    std::cout << rec.dump() << '\n';
    return kOk;
}

int cmd_eval(const Options& o) {
    if (o.model.empty()) throw std::invalid_argument("eval: --model required");
    const ModelFile f = load_model(o.model);
    Dataset data = o.data.empty() ? eval_data(o) : load_dataset(o.data, f.config.classes);
    if (data.empty()) throw std::invalid_argument("eval: dataset is empty");
    const ModelWeights w = weights_from_file(f);
    const ActScheme act = act_scheme_of(f);
    const auto quant = quant_from_file(f);
    const double acc = evaluate(w, data, act, o.integer ? &quant : nullptr, std::max<std::size_t>(o.batch, 1));
    const json rec{{"model", o.model}, {"examples", data.size()}, {"accuracy", acc},
                   {"integer_kernels", o.integer}, {"seed", o.seed}};
    std::cout << rec.dump() << '\n';
    return kOk;
}

json histogram_json(const Histogram& h) { return json{{"lo", h.lo}, {"hi", h.hi}, {"counts", h.counts}}; }

int cmd_inspect(const Options& o) {
    if (o.model.empty()) throw std::invalid_argument("inspect: --model required");
    const ModelFile f = load_model(o.model);
    json meta = json::object();
    for (const auto& [k, v] : f.meta) meta[k] = v;
    std::cout << json{{"config", {{"layers", f.config.layers}, {"hidden", f.config.hidden}, {"heads", f.config.heads},
                                   {"ffn", f.config.ffn}, {"vocab", f.config.vocab}, {"classes", f.config.classes}}},
                      {"meta", meta}}
                     .dump()
              << '\n';
    for (const StoredTensor& t : f.tensors) {
        json rec{{"tensor", t.name}, {"role", to_string(t.role)}, {"method", t.method}};
        if (t.is_quantized()) {
            const QuantTensor& q = std::get<QuantTensor>(t.value);
            const SignStats s = sign_stats(q);
            rec["bits"] = q.bits;
            rec["granularity"] = to_string(q.granularity);
            rec["shape"] = {q.rows, q.cols};
            rec["zeros"] = s.zero;
            rec["positive"] = s.positive;
            rec["negative"] = s.negative;
        } else {
            rec["bits"] = 32;
            rec["shape"] = std::get<Tensor>(t.value).shape();
        }
        const Tensor dense = t.dense();
        if (!dense.empty()) rec["histogram"] = histogram_json(histogram_export(dense, o.bins));
        std::cout << rec.dump() << '\n';
    }
    if (!o.data.empty()) {
        const Dataset probe = load_dataset(o.data, f.config.classes);
        if (probe.empty()) throw std::invalid_argument("inspect: probe dataset is empty");
        const ForwardTrace tr = forward(weights_from_file(f), batches(probe, 64).front(), act_scheme_of(f));
        for (std::size_t l = 0; l < tr.hidden.size(); ++l) {
            std::cout << json{{"activation", "hidden." + std::to_string(l)},
                              {"histogram", histogram_json(histogram_export(tr.hidden[l], o.bins))}}
                             .dump()
                      << '\n';
        }
    }
    return kOk;
}

int cmd_bench(const Options& o) {
    const QuantPlan plan = make_plan(o);
    const GemmPlan g(o.m, o.n, o.k, plan.weight_granularity, parse_act_scheme(o.act));
    const BenchRecord r = bench_gemm(g, o.reps, o.seed);
    const json rec{{"bench", "ternary_gemm"},
                   {"m", o.m},
                   {"n", o.n},
                   {"k", o.k},
                   {"repetitions", r.repetitions},
                   {"ternary_ns_per_op", r.ternary_ns_per_op},
                   {"float_ns_per_op", r.float_ns_per_op},
                   {"bytes_touched", r.bytes_touched},
                   {"seed", o.seed}};
    append_line(metrics_dir(o) / "bench.jsonl", rec.dump());
    std::cout << rec.dump() << '\n';
    return kOk;
}

int cmd_size(const Options& o) {
    ModelConfig c = o.config == "bert-base" ? ModelConfig::bert_base() : micro_config(o);
    if (o.config != "bert-base" && o.config != "micro") throw std::invalid_argument("size: --config must be micro or bert-base");
    const SizeReport r = size_report(c, make_plan(o));
    json rec = size_json(r);
    rec["config"] = o.config;
    append_line(metrics_dir(o) / "size_report.jsonl", rec.dump());
    std::cout << rec.dump() << '\n';
    return kOk;
}

int cmd_ablate(const Options& o) {
    const Dataset train = train_data(o);
    const Dataset eval = eval_data(o);
    const ModelWeights teacher = obtain_teacher(o, train);
    const double teacher_acc = evaluate(teacher, eval);
    const fs::path metrics = metrics_dir(o) / "ablation.jsonl";

    struct Row {
        std::string study, w_gran, e_gran, act, ablation;
    };
    const std::vector<Row> grid = {
        {"granularity", "layer", "layer", "minmax", "none"}, {"granularity", "layer", "row", "minmax", "none"},
        {"granularity", "row", "layer", "minmax", "none"},   {"granularity", "row", "row", "minmax", "none"},
        {"activation", "layer", "row", "minmax", "none"},    {"activation", "layer", "row", "sym", "none"},
        {"distillation", "layer", "row", "minmax", "none"},  {"distillation", "layer", "row", "minmax", "no-trm"},
        {"distillation", "layer", "row", "minmax", "no-trm-no-logits"},
    };
    std::cout << std::left << std::setw(14) << "study" << std::setw(8) << "w-gran" << std::setw(8) << "e-gran"
              << std::setw(8) << "act" << std::setw(18) << "ablation" << "accuracy\n";
    for (std::size_t i = 0; i < grid.size(); ++i) {
        Options run = o;
        run.w_gran = grid[i].w_gran;
        run.e_gran = grid[i].e_gran;
        run.act = grid[i].act;
        TrainConfig tc;
        tc.plan = make_plan(run);
        tc.stages = o.stages;
        tc.epochs = o.epochs;
        tc.batch_size = o.batch;
        tc.lr = o.lr;
        tc.seed = o.seed + i;
        tc.ablation = parse_ablation(grid[i].ablation);
        const TrainResult r = run_training(teacher, train, &eval, tc);
        const double acc = evaluate(r.student.effective, eval, tc.plan.activations());
        append_line(metrics, json{{"study", grid[i].study},
                                  {"plan", tc.plan.notation()},
                                  {"w_gran", grid[i].w_gran},
                                  {"e_gran", grid[i].e_gran},
                                  {"act", grid[i].act},
                                  {"ablation", grid[i].ablation},
                                  {"accuracy", acc},
                                  {"teacher_acc", teacher_acc},
                                  {"seed", tc.seed}}
                                 .dump());
        std::cout << std::setw(14) << grid[i].study << std::setw(8) << grid[i].w_gran << std::setw(8) << grid[i].e_gran
                  << std::setw(8) << grid[i].act << std::setw(18) << grid[i].ablation << std::fixed
                  << std::setprecision(4) << acc << '\n';
    }
    std::cout << "teacher " << std::fixed << std::setprecision(4) << teacher_acc << '\n';
    return kOk;
}

int cmd_data(const Options& o) {
    const Dataset d = make_dataset(task_spec(o), o.train_size, o.seed);
    const fs::path path = o.data.empty() ? fs::path(o.out) / (o.task + ".jsonl") : fs::path(o.data);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    save_dataset(path, d);
    std::cout << json{{"dataset", path.string()}, {"examples", d.size()}, {"seed", o.seed}}.dump() << '\n';
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Ternary and low-bit quantization with distillation for micro transformers"};
    app.require_subcommand(1);
    Options o;

    auto plan_flags = [&](CLI::App* c) {
        c->add_option("--plan", o.plan, "bit widths W-E-A, e.g. 2-2-8");
        c->add_option("--method", o.method, "twn | twn-exact | lat | lat-exact | laq3");
        c->add_option("--w-gran", o.w_gran, "layer | row (transformer weights)");
        c->add_option("--e-gran", o.e_gran, "layer | row (word embedding)");
        c->add_option("--act", o.act, "minmax | sym");
    };
    auto model_flags = [&](CLI::App* c) {
        c->add_option("--task", o.task, "majority | parity");
        c->add_option("--data", o.data, "dataset (JSONL); synthetic from --seed when absent");
        c->add_option("--train-size", o.train_size);
        c->add_option("--eval-size", o.eval_size);
        c->add_option("--seq", o.seq, "sequence length");
        c->add_option("--layers", o.layers);
        c->add_option("--hidden", o.hidden);
        c->add_option("--heads", o.heads);
        c->add_option("--ffn", o.ffn);
        c->add_option("--vocab", o.vocab);
    };
    auto train_flags = [&](CLI::App* c) {
        c->add_option("--stages", o.stages, "1 or 2")->check(CLI::IsMember({1, 2}));
        c->add_option("--lr", o.lr);
        c->add_option("--epochs", o.epochs);
        c->add_option("--batch", o.batch);
        c->add_option("--ablation", o.ablation, "none | no-trm | no-trm-no-logits");
        c->add_option("--teacher", o.teacher, "teacher checkpoint; trained on the fly when absent");
        c->add_option("--teacher-epochs", o.teacher_epochs);
        c->add_option("--teacher-lr", o.teacher_lr);
        c->add_option("--checkpoint-every", o.checkpoint_every, "save the student every N steps (0: off)");
    };
    auto common = [&](CLI::App* c) {
        c->add_option("--seed", o.seed);
        c->add_option("--out", o.out, "output directory");
    };

    auto* teacher = app.add_subcommand("teacher", "train a full-precision teacher");
    model_flags(teacher);
    common(teacher);
    teacher->add_option("--epochs", o.teacher_epochs);
    teacher->add_option("--lr", o.teacher_lr);
    teacher->add_option("--batch", o.batch);

    auto* train = app.add_subcommand("train", "distillation-aware quantization training");
    plan_flags(train);
    model_flags(train);
    train_flags(train);
    common(train);

    auto* quantize = app.add_subcommand("quantize", "quantize a checkpoint");
    plan_flags(quantize);
    common(quantize);
    quantize->add_option("--in", o.in, "input checkpoint")->required();

    auto* eval = app.add_subcommand("eval", "accuracy of a model file");
    model_flags(eval);
    common(eval);
    eval->add_option("--model", o.model)->required();
    eval->add_option("--batch", o.batch, "evaluation batch size");
    eval->add_flag("--integer", o.integer, "run quantized linear layers through the integer kernel");

    auto* inspect = app.add_subcommand("inspect", "manifest, sign statistics and histograms");
    common(inspect);
    inspect->add_option("--model", o.model)->required();
    inspect->add_option("--data", o.data, "probe dataset for activation histograms");
    inspect->add_option("--bins", o.bins);

    auto* bench = app.add_subcommand("bench", "time the ternary kernel against float");
    plan_flags(bench);
    common(bench);
    bench->add_option("-m", o.m);
    bench->add_option("-n", o.n);
    bench->add_option("-k", o.k);
    bench->add_option("--reps", o.reps);

    auto* ablate = app.add_subcommand("ablate", "granularity, activation and distillation ablations");
    plan_flags(ablate);
    model_flags(ablate);
    train_flags(ablate);
    common(ablate);

    auto* size = app.add_subcommand("size", "model size for a plan");
    plan_flags(size);
    model_flags(size);
    common(size);
    size->add_option("--config", o.config, "micro | bert-base");

    auto* data = app.add_subcommand("data", "write a synthetic dataset");
    model_flags(data);
    common(data);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfigError;
    }

    try {
        if (*teacher) return cmd_teacher(o);
        if (*train) return cmd_train(o);
        if (*quantize) return cmd_quantize(o);
        if (*eval) return cmd_eval(o);
        if (*inspect) return cmd_inspect(o);
        if (*bench) return cmd_bench(o);
        if (*ablate) return cmd_ablate(o);
        if (*size) return cmd_size(o);
        if (*data) return cmd_data(o);
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << '\n';
        return kNumericalError;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << '\n';
        return kIoError;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return kIoError;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const std::logic_error& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const std::runtime_error& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return kIoError;
    }
    return kOk;
}
