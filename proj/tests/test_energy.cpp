#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <vector>

#include "oodguard/archive.hpp"
#include "oodguard/energy.hpp"
#include "oodguard/errors.hpp"
#include "oodguard/rng.hpp"

using oodguard::ActivationArchive;
using oodguard::EnergyConfig;
using oodguard::Error;
using oodguard::Rng;
using oodguard::TensorBuffer;

namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& tag) {
    const auto dir = fs::temp_directory_path() / ("oodguard_test_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

ActivationArchive logits_archive(const std::vector<double>& flat, std::size_t n, std::size_t k) {
    ActivationArchive archive;
    archive.layers.push_back(
        {"dense0", TensorBuffer::from_f64({n, 1}, std::vector<double>(n, 0.0))});
    archive.logits = TensorBuffer::from_f64({n, k}, flat);
    return archive;
}

// Direct unshifted evaluation; safe only for moderate logits.
double energy_by_hand(const std::vector<double>& logits, double t) {
    double acc = 0.0;
    for (double v : logits) acc += std::exp(v / t);
    return -t * std::log(acc);
}

}  // namespace

TEST_CASE("energy of balanced and singleton logits") {
    const std::vector<double> balanced{0.0, 0.0};
    CHECK(oodguard::energy(balanced, 1.0) == doctest::Approx(-std::log(2.0)).epsilon(1e-12));

    const std::vector<double> single{3.5};
    CHECK(oodguard::energy(single, 1.0) == doctest::Approx(-3.5).epsilon(1e-12));
    CHECK(oodguard::energy(single, 2.0) == doctest::Approx(-3.5).epsilon(1e-12));
}

TEST_CASE("energy matches the direct formula at safe magnitudes") {
    Rng rng(51);
    for (double t : {0.5, 1.0, 2.0}) {
        for (int round = 0; round < 40; ++round) {
            std::vector<double> logits(1 + rng.index(6));
            for (auto& v : logits) v = rng.normal(0.0, 3.0);
            CHECK(oodguard::energy(logits, t) ==
                  doctest::Approx(energy_by_hand(logits, t)).epsilon(1e-12));
        }
    }
}

TEST_CASE("energy is invariant to shifting all logits up to the linear term") {
    // E(f + c) = E(f) - c at T = 1; with the shift removed they must agree.
    Rng rng(52);
    for (int round = 0; round < 30; ++round) {
        std::vector<double> logits(2 + rng.index(5));
        for (auto& v : logits) v = rng.normal(0.0, 2.0);
        const double c = rng.normal(0.0, 50.0);
        std::vector<double> shifted = logits;
        for (auto& v : shifted) v += c;
        CHECK(oodguard::energy(shifted, 1.0) + c ==
              doctest::Approx(oodguard::energy(logits, 1.0)).epsilon(1e-9));
    }
}

TEST_CASE("energy decreases when any logit grows") {
    Rng rng(53);
    for (int round = 0; round < 30; ++round) {
        std::vector<double> logits(2 + rng.index(4));
        for (auto& v : logits) v = rng.normal();
        const double before = oodguard::energy(logits, 1.0);
        logits[rng.index(logits.size())] += 0.5 + rng.uniform01();
        CHECK(oodguard::energy(logits, 1.0) < before);
    }
}

TEST_CASE("low temperature approaches the max logit") {
    Rng rng(54);
    int checked = 0;
    while (checked < 20) {
        std::vector<double> logits(3);
        for (auto& v : logits) v = rng.normal(0.0, 2.0);
        std::vector<double> sorted = logits;
        std::sort(sorted.begin(), sorted.end());
        // The limit needs a clear winner: near-ties keep an O(T log m) term.
        if (sorted[2] - sorted[1] < 0.5) continue;
        CHECK(oodguard::energy(logits, 0.01) == doctest::Approx(-sorted[2]).epsilon(1e-6));
        ++checked;
    }
}

TEST_CASE("energy survives extreme logits without overflow") {
    const std::vector<double> huge{1e4, 1e4 - 1.0, 0.0};
    const double e = oodguard::energy(huge, 1.0);
    CHECK(std::isfinite(e));
    CHECK(e == doctest::Approx(-(1e4 + std::log(1.0 + std::exp(-1.0)))).epsilon(1e-9));

    const std::vector<double> tiny{-1e4, -1e4};
    const double e2 = oodguard::energy(tiny, 1.0);
    CHECK(std::isfinite(e2));
    CHECK(e2 == doctest::Approx(1e4 - std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("energy validates its inputs") {
    const std::vector<double> ok{1.0, 2.0};
    const std::vector<double> empty;
    const std::vector<double> nan{1.0, std::numeric_limits<double>::quiet_NaN()};
    const std::vector<double> inf{std::numeric_limits<double>::infinity()};
    CHECK_THROWS_WITH_AS(oodguard::energy(empty, 1.0), doctest::Contains("MissingLogits"), Error);
    CHECK_THROWS_WITH_AS(oodguard::energy(nan, 1.0), doctest::Contains("NonFiniteLogit"), Error);
    CHECK_THROWS_WITH_AS(oodguard::energy(inf, 1.0), doctest::Contains("NonFiniteLogit"), Error);
    CHECK_THROWS_WITH_AS(oodguard::energy(ok, 0.0), doctest::Contains("BadConfig"), Error);
    CHECK_THROWS_WITH_AS(oodguard::energy(ok, -1.0), doctest::Contains("BadConfig"), Error);
}

TEST_CASE("threshold is the 95th nearest-rank percentile of training energies") {
    // 100 samples with distinct single logits v_i: energies are -v_i, so the
    // sorted energies are known in closed form.
    std::vector<double> flat(100);
    for (int i = 0; i < 100; ++i) flat[static_cast<std::size_t>(i)] = static_cast<double>(i);
    // Single-logit archives need K >= 2; pad with a very negative second
    // logit so the energy stays -v_i up to 1e-12.
    std::vector<double> padded;
    for (double v : flat) {
        padded.push_back(v);
        padded.push_back(v - 200.0);
    }
    const auto archive = logits_archive(padded, 100, 2);
    const auto config = oodguard::fit_threshold(archive, 1.0);
    // Energies are ~ -99..0; ascending rank 95 is -(100 - 95) = -5.
    CHECK(config.threshold == doctest::Approx(-5.0).epsilon(1e-9));
    CHECK(config.temperature == 1.0);
}

TEST_CASE("identical training energies produce a tight threshold") {
    const std::vector<double> flat(40 * 2, 1.25);
    const auto archive = logits_archive(flat, 40, 2);
    const auto config = oodguard::fit_threshold(archive, 1.0);
    // No sample is strictly above its own energy, so nothing is flagged.
    std::vector<double> row{1.25, 1.25};
    CHECK(!oodguard::is_ood(config, row));
}

TEST_CASE("refitting on the training archive flags at most the nominal tail") {
    Rng rng(55);
    const std::size_t n = 200;
    std::vector<double> flat;
    for (std::size_t i = 0; i < n; ++i) {
        flat.push_back(rng.normal(2.0, 1.0));
        flat.push_back(rng.normal(-1.0, 1.0));
        flat.push_back(rng.normal(0.0, 1.0));
    }
    const auto archive = logits_archive(flat, n, 3);
    const auto config = oodguard::fit_threshold(archive, 1.0);

    std::size_t flagged = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> row{flat[3 * i], flat[3 * i + 1], flat[3 * i + 2]};
        if (oodguard::is_ood(config, row)) ++flagged;
    }
    CHECK(flagged <= static_cast<std::size_t>(std::ceil(0.05 * static_cast<double>(n))) + 1);
}

TEST_CASE("scores are negated energies in archive order") {
    Rng rng(56);
    std::vector<double> flat(12 * 3);
    for (auto& v : flat) v = rng.normal(0.0, 2.0);
    const auto archive = logits_archive(flat, 12, 3);
    const EnergyConfig config{1.0, 0.0};
    const auto series = oodguard::score(config, archive);
    CHECK(series.source_tag == "energy");
    REQUIRE(series.values.size() == 12);
    for (std::size_t i = 0; i < 12; ++i) {
        const std::vector<double> row{flat[3 * i], flat[3 * i + 1], flat[3 * i + 2]};
        CHECK(series.values[i] == doctest::Approx(-oodguard::energy(row, 1.0)).epsilon(1e-12));
    }
}

TEST_CASE("fit_threshold rejects unusable archives") {
    const auto empty = logits_archive({}, 0, 2);
    CHECK_THROWS_WITH_AS(oodguard::fit_threshold(empty, 1.0), doctest::Contains("EmptyArchive"),
                         Error);
    const auto ok = logits_archive({1.0, 2.0}, 1, 2);
    CHECK_THROWS_WITH_AS(oodguard::fit_threshold(ok, 0.0), doctest::Contains("BadConfig"), Error);
}

TEST_CASE("energy config round-trips through disk") {
    const auto dir = temp_dir("energy");
    const EnergyConfig config{1.5, -3.25};
    oodguard::save_energy(config, dir / "model");
    const auto loaded = oodguard::load_energy(dir / "model");
    CHECK(loaded.temperature == config.temperature);
    CHECK(loaded.threshold == config.threshold);

    // A manifest for a different method must not load as energy.
    oodguard::save_energy(config, dir / "other");
    {
        std::ofstream out(dir / "other" / "manifest.json");
        out << R"({"method": "gram", "temperature": 1.0, "threshold": 0.0})";
    }
    CHECK_THROWS_WITH_AS(oodguard::load_energy(dir / "other"), doctest::Contains("BadConfig"),
                         Error);
}
