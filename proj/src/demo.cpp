#include "oodguard/demo.hpp"

#include <fstream>

#include <json.hpp>

#include "oodguard/detector.hpp"
#include "oodguard/errors.hpp"
#include "oodguard/micronet.hpp"

namespace oodguard {

DemoResult run_demo(const DemoConfig& config) {
    if (config.out_dir.empty()) raise(Errc::bad_config, "demo needs an output directory");
    if (config.trials < 1) raise(Errc::bad_config, "trials must be >= 1");
    std::filesystem::create_directories(config.out_dir);

    SyntheticTask far_task = make_blobs_task(config.classes, config.dim, config.radius_sigmas,
                                            config.sigma, OodKind::far_cluster, config.seed);
    SyntheticTask near_task = far_task;
    near_task.ood_kind = OodKind::near_midpoints;

    // Identical seeds draw identical train/test splits; only the OOD samples
    // differ between the two tasks.
    const TaskData far_data =
        sample_task(far_task, config.train_per_class, config.test_per_class, config.ood_samples);
    const TaskData near_data =
        sample_task(near_task, config.train_per_class, config.test_per_class, config.ood_samples);

    std::vector<int> widths;
    widths.push_back(config.dim);
    widths.insert(widths.end(), config.hidden.begin(), config.hidden.end());
    widths.push_back(config.classes);
    MicroNet net = make_net(widths, config.seed);
    TrainConfig train_config;
    train_config.epochs = config.epochs;
    train_config.learning_rate = config.learning_rate;
    train_config.seed = config.seed;
    net = train(std::move(net), far_data.train_inputs, far_data.train_labels, train_config);

    DemoResult result;
    result.train_accuracy = train_accuracy(net, far_data.train_inputs, far_data.train_labels);

    const ActivationArchive train_arch =
        make_archive(net, far_data.train_inputs, far_data.train_labels);
    const ActivationArchive test_arch =
        make_archive(net, far_data.test_inputs, far_data.test_labels);
    const ActivationArchive far_arch = make_archive(net, far_data.ood_inputs, std::nullopt);
    const ActivationArchive near_arch = make_archive(net, near_data.ood_inputs, std::nullopt);

    save_net(net, config.out_dir / "net");
    save_archive(train_arch, config.out_dir / "archives" / "train");
    save_archive(test_arch, config.out_dir / "archives" / "test");
    save_archive(near_arch, config.out_dir / "archives" / "ood_near");
    save_archive(far_arch, config.out_dir / "archives" / "ood_far");

    nlohmann::json comparison;
    comparison["seed"] = config.seed;
    comparison["trials"] = config.trials;
    comparison["train_accuracy"] = result.train_accuracy;

    for (const std::string method : {"mahalanobis", "gram", "energy"}) {
        FitOptions options;
        options.method = method;
        const Detector detector = fit_detector(train_arch, options).detector;
        save_detector(detector, config.out_dir / ("model_" + method));

        const ScoreSeries in_scores = score(detector, test_arch);
        const ScoreSeries near_scores = score(detector, near_arch);
        const ScoreSeries far_scores = score(detector, far_arch);
        write_score_csv(config.out_dir / ("scores_" + method + "_test.csv"), detector, in_scores);
        write_score_csv(config.out_dir / ("scores_" + method + "_near.csv"), detector,
                        near_scores);
        write_score_csv(config.out_dir / ("scores_" + method + "_far.csv"), detector, far_scores);

        DetectorComparison comp;
        comp.near = evaluate(in_scores, near_scores, config.trials, config.seed);
        comp.far = evaluate(in_scores, far_scores, config.trials, config.seed);
        const auto emit = [&](const std::string& dataset, const EvalReport& report) {
            std::ofstream out(config.out_dir / ("report_" + method + "_" + dataset + ".json"));
            if (!out) raise(Errc::io_failure, "cannot write demo report");
            out << report_to_json(report) << "\n";
            write_histogram_csv(config.out_dir / ("hist_" + method + "_" + dataset + ".csv"),
                                report.histogram);
            comparison["methods"][method][dataset] =
                nlohmann::json::parse(report_to_json(report));
        };
        emit("near", comp.near);
        emit("far", comp.far);
        result.methods.emplace(method, std::move(comp));
    }

    std::ofstream out(config.out_dir / "comparison.json");
    if (!out) raise(Errc::io_failure, "cannot write comparison table");
    out << comparison.dump(2) << "\n";
    return result;
}

}  // namespace oodguard
