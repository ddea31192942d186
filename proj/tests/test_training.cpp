#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <sstream>

#include "oracles.hpp"
#include "p2mam/checkpoint.hpp"
#include "p2mam/errors.hpp"
#include "p2mam/evaluation.hpp"
#include "p2mam/training.hpp"
#include "support.hpp"

using namespace p2mam;

namespace {

HyperParams small_hp(Variant v = Variant::OP) {
  HyperParams hp;
  hp.variant = v;
  hp.d = 8;
  hp.n = 4;
  hp.b = 2;
  hp.epochs = 3;
  hp.batch_size = 8;
  hp.seed = 11;
  return hp;
}

TrainConfig config_for(const HyperParams& hp, std::size_t threads = 1) {
  TrainConfig cfg;
  cfg.hp = hp;
  cfg.shuffle_seed = 5;
  cfg.threads = threads;
  return cfg;
}

std::vector<Example> chain_examples(std::size_t m, std::size_t sessions, std::uint64_t seed) {
  Rng rng(seed);
  const auto succ = testing::random_successor(m, rng);
  return augment_all(testing::chain_sessions(succ, sessions, 5, rng));
}

double recall20(const std::vector<Example>& ex, const ModelParams& p, const HyperParams& hp, std::size_t m) {
  const std::size_t ks[] = {20};
  return evaluate(ex, &p, hp, m, ks, 1).at(20).recall;
}

}  // namespace

TEST_CASE("batch gradient equals the sum of per-example gradients") {
  const std::size_t m = 12;
  for (Variant v : {Variant::O, Variant::OP, Variant::Mean}) {
    const HyperParams hp = small_hp(v);
    const ModelParams params = init_params(m, hp, 3);
    Rng rng(4);
    std::vector<FixedExample> data;
    for (int i = 0; i < 3; ++i) data.push_back(oracle::random_fixed(rng, m, hp.n));

    ModelParams want = ModelParams::zeros_like(params);
    double want_loss = 0.0;
    for (const auto& fx : data) {
      ModelParams one = ModelParams::zeros_like(params);
      want_loss += loss_and_gradient(fx, params, hp, one);
      const auto dst = want.tensors();
      const auto src = std::as_const(one).tensors();
      for (std::size_t t = 0; t < dst.size(); ++t) *dst[t] += *src[t];
    }

    const std::size_t idx[] = {0, 1, 2};
    ModelParams got = ModelParams::zeros_like(params);
    std::vector<ModelParams> scratch;
    const double loss = batch_gradient(data, idx, params, hp, got, scratch, 2);
    CHECK(loss == doctest::Approx(want_loss).epsilon(1e-12));
    const auto g = std::as_const(got).tensors();
    const auto w = std::as_const(want).tensors();
    for (std::size_t t = 0; t < g.size(); ++t) CHECK(max_abs_diff(*g[t], *w[t]) < 1e-12);
  }
}

TEST_CASE("zero learning rate leaves the parameters at their initial values") {
  HyperParams hp = small_hp();
  hp.lr = 0.0;
  const auto ex = chain_examples(10, 20, 1);
  const TrainResult r = train(ex, 10, config_for(hp));
  CHECK(r.params == init_params(10, hp, hp.seed));
  CHECK(r.report.epoch_loss.size() == hp.epochs);
}

TEST_CASE("training is bit-identical across runs and thread counts") {
  const HyperParams hp = small_hp();
  const auto ex = chain_examples(15, 40, 2);
  const TrainResult a = train(ex, 15, config_for(hp, 1));
  const TrainResult b = train(ex, 15, config_for(hp, 1));
  const TrainResult c = train(ex, 15, config_for(hp, 3));
  CHECK(a.params == b.params);
  CHECK(a.params == c.params);
  CHECK(a.report.epoch_loss == c.report.epoch_loss);
  CHECK(a.report.checkpoint_id == c.report.checkpoint_id);

  TrainConfig other = config_for(hp);
  other.shuffle_seed = 6;
  CHECK_FALSE(train(ex, 15, other).params == a.params);
}

TEST_CASE("padding row of V stays zero through training") {
  HyperParams hp = small_hp();
  hp.lr = 0.05;
  const auto ex = chain_examples(10, 20, 3);
  const TrainResult r = train(ex, 10, config_for(hp));
  for (double x : r.params.V.row(0)) CHECK(x == 0.0);
}

TEST_CASE("a single example is memorized") {
  for (Variant v : {Variant::O, Variant::P, Variant::OP, Variant::LastOP}) {
    HyperParams hp = small_hp(v);
    hp.lr = 1e-2;
    hp.epochs = 300;
    const std::vector<Example> ex{{{3, 1, 4}, 2}};
    const TrainResult r = train(ex, 6, config_for(hp));
    CHECK(r.report.epoch_loss.back() < 1e-2);
  }
}

TEST_CASE("epoch loss keeps falling after warm-up on a learnable task") {
  HyperParams hp = small_hp(Variant::O);
  hp.d = 16;
  hp.lr = 1e-2;
  hp.epochs = 12;
  const auto ex = chain_examples(20, 60, 4);
  const TrainResult r = train(ex, 20, config_for(hp));
  for (std::size_t e = 3; e < r.report.epoch_loss.size(); ++e) {
    CHECK(r.report.epoch_loss[e] <= r.report.epoch_loss[e - 1] + 1e-3);
  }
  CHECK(r.report.epoch_loss.back() < r.report.epoch_loss.front());
}

TEST_CASE("training rejects configurations with nothing to learn") {
  const auto ex = chain_examples(10, 5, 5);
  CHECK_THROWS_AS(train(ex, 10, config_for(small_hp(Variant::Pop))), ConfigError);
  CHECK_THROWS_AS(train({}, 10, config_for(small_hp())), ConfigError);
  HyperParams bad = small_hp();
  bad.b = 3;
  CHECK_THROWS_AS(train(ex, 10, config_for(bad)), ConfigError);
}

TEST_CASE("divergent training throws and keeps the last good checkpoint") {
  testing::TempDir dir("diverge");
  HyperParams hp = small_hp();
  hp.lr = 1e200;
  hp.batch_size = 4;
  TrainConfig cfg = config_for(hp);
  cfg.checkpoint_path = dir / "m.bin";
  const auto ex = chain_examples(10, 20, 6);
  CHECK_THROWS_AS(train(ex, 10, cfg), NumericalError);
  const Checkpoint c = load_checkpoint(cfg.checkpoint_path);
  for (const Matrix* t : c.params.tensors())
    for (double x : t->values()) CHECK(std::isfinite(x));
  // Divergence happens in the first epoch, so the kept state is the init.
  CHECK(testing::read_text(cfg.checkpoint_path) ==
        encode_checkpoint(CheckpointHeader::from(hp, 10), init_params(10, hp, hp.seed)));
}

TEST_CASE("validation keeps the best epoch checkpoint") {
  testing::TempDir dir("best");
  HyperParams hp = small_hp();
  hp.epochs = 4;
  TrainConfig cfg = config_for(hp);
  cfg.checkpoint_path = dir / "m.bin";
  const auto ex = chain_examples(30, 40, 7);
  std::ostringstream log;
  const TrainResult r = train(ex, 30, cfg, &ex, &log);
  REQUIRE(r.report.valid_recall20.size() == 4);
  REQUIRE(r.report.best_valid_recall20);
  CHECK(*r.report.best_valid_recall20 == r.report.valid_recall20[r.report.best_epoch - 1]);
  auto best = cfg.checkpoint_path;
  best += ".best";
  CHECK(std::filesystem::exists(best));
  CHECK(log.str().rfind("epoch\tstep\tloss\tseconds\tvalid_recall20\n", 0) == 0);
  CHECK(log.str().find("# summary epochs=4") != std::string::npos);
}

TEST_CASE("config parsing") {
  const auto kv = parse_config_text("# comment\n\nvariant = o\n d=16 \ngrid.n = 10, 15,20\n");
  REQUIRE(kv.size() == 3);
  CHECK(kv[1] == std::pair<std::string, std::string>{"d", "16"});

  TrainConfig cfg;
  for (const auto& [k, v] : kv) apply_setting(cfg, k, v);
  CHECK(cfg.hp.variant == Variant::O);
  CHECK(cfg.hp.d == 16);
  REQUIRE(cfg.grid.size() == 1);
  CHECK(cfg.grid[0].second == std::vector<std::string>{"10", "15", "20"});

  CHECK_THROWS_AS(parse_config_text("novalue\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("= 3\n"), ConfigError);
  CHECK_THROWS_AS(apply_setting(cfg, "colour", "red"), ConfigError);
  CHECK_THROWS_AS(apply_setting(cfg, "d", "-4"), ConfigError);
  CHECK_THROWS_AS(apply_setting(cfg, "d", "4x"), ConfigError);
  CHECK_THROWS_AS(apply_setting(cfg, "lr", "fast"), ConfigError);
  CHECK_THROWS_AS(apply_setting(cfg, "use_pad_mask", "maybe"), ConfigError);
  CHECK_THROWS_AS(apply_setting(cfg, "grid.d", "8,,16"), ConfigError);
  CHECK_THROWS_AS(apply_setting(cfg, "grid.d", "8,x"), ConfigError);
  CHECK_THROWS_AS(apply_setting(cfg, "grid.checkpoint", "a,b"), ConfigError);
  CHECK_THROWS_AS(parse_config_file("/nonexistent/p2mam.cfg"), IoError);
}

TEST_CASE("the initial search ranges are accepted") {
  TrainConfig cfg;
  apply_setting(cfg, "grid.d", "32,64,128");
  apply_setting(cfg, "grid.n", "10,15,20");
  apply_setting(cfg, "grid.b", "1,2,4");
  REQUIRE(cfg.grid.size() == 3);
  CHECK(cfg.grid[0].first == "d");
  CHECK(cfg.grid[2].second == std::vector<std::string>{"1", "2", "4"});
  apply_setting(cfg, "grid.d", "16");  // replaces rather than appends
  CHECK(cfg.grid.size() == 3);
  CHECK(cfg.grid[0].second == std::vector<std::string>{"16"});
}

TEST_CASE("environment overrides") {
  ::setenv("P2MAM_D", "24", 1);
  ::setenv("P2MAM_GRID_B", "1,2", 1);
  const auto env = environment_overrides();
  ::unsetenv("P2MAM_D");
  ::unsetenv("P2MAM_GRID_B");
  TrainConfig cfg;
  for (const auto& [k, v] : env) apply_setting(cfg, k, v);
  CHECK(cfg.hp.d == 24);
  REQUIRE(cfg.grid.size() == 1);
  CHECK(cfg.grid[0].first == "b");
}

TEST_CASE("grid search") {
  const std::size_t m = 60;
  const auto train_ex = chain_examples(m, 80, 8);
  const auto valid_ex = chain_examples(m, 20, 8);  // same seed: same successor map
  HyperParams hp = small_hp(Variant::O);
  hp.d = 16;
  hp.n = 5;
  hp.b = 1;
  hp.epochs = 20;

  SUBCASE("singleton grid trains exactly one point") {
    TrainConfig cfg = config_for(hp);
    apply_setting(cfg, "grid.d", "16");
    const GridResult g = grid_search(train_ex, valid_ex, m, cfg);
    REQUIRE(g.table.size() == 1);
    CHECK(g.best_index == 0);
    CHECK(g.warnings.empty());
    const TrainResult direct = train(train_ex, m, cfg);
    CHECK(*g.table[0].valid_recall20 == recall20(valid_ex, direct.params, hp, m));
  }

  SUBCASE("a learning model beats a frozen one") {
    TrainConfig cfg = config_for(hp);
    apply_setting(cfg, "grid.lr", "0,0.01");
    const GridResult g = grid_search(train_ex, valid_ex, m, cfg);
    REQUIRE(g.table.size() == 2);
    CHECK(g.best_index == 1);
    CHECK(g.best.lr == 0.01);
    CHECK(*g.table[1].valid_recall20 > *g.table[0].valid_recall20);
    REQUIRE(g.warnings.size() == 1);
    CHECK(g.warnings[0].find("lr=0.01") != std::string::npos);
  }

  SUBCASE("ties go to the first point") {
    TrainConfig cfg = config_for(hp);
    cfg.hp.lr = 0.0;
    apply_setting(cfg, "grid.batch_size", "8,16,32");
    const GridResult g = grid_search(train_ex, valid_ex, m, cfg);
    CHECK(*g.table[0].valid_recall20 == *g.table[2].valid_recall20);
    CHECK(g.best_index == 0);
    CHECK(g.warnings.size() == 1);
  }

  SUBCASE("interior winners raise no warning; first key varies slowest") {
    TrainConfig cfg = config_for(hp);
    apply_setting(cfg, "grid.lr", "0,0.01,0");
    apply_setting(cfg, "grid.seed", "1,2");
    const GridResult g = grid_search(train_ex, valid_ex, m, cfg);
    REQUIRE(g.table.size() == 6);
    CHECK(g.table[1].assignment == std::vector<std::pair<std::string, std::string>>{{"lr", "0"}, {"seed", "2"}});
    CHECK((g.best_index == 2 || g.best_index == 3));
    for (const auto& w : g.warnings) CHECK(w.find("lr=") == std::string::npos);
  }

  SUBCASE("failed points are recorded and skipped") {
    TrainConfig cfg = config_for(hp);
    apply_setting(cfg, "grid.b", "1,3");
    const GridResult g = grid_search(train_ex, valid_ex, m, cfg);
    REQUIRE(g.table.size() == 2);
    CHECK(g.table[0].valid_recall20);
    CHECK_FALSE(g.table[1].valid_recall20);
    CHECK_FALSE(g.table[1].error.empty());
    CHECK(g.best_index == 0);
    std::ostringstream tsv;
    write_grid_tsv(tsv, g);
    CHECK(tsv.str().rfind("b\tvalid_recall20\tbest\terror\n", 0) == 0);
    CHECK(tsv.str().find("\n1\t") != std::string::npos);
  }

  SUBCASE("all points failing is an error") {
    TrainConfig cfg = config_for(hp);
    cfg.hp.d = 16;
    apply_setting(cfg, "grid.b", "3,5");
    CHECK_THROWS_AS(grid_search(train_ex, valid_ex, m, cfg), NumericalError);
  }

  SUBCASE("an empty grid is a config error") {
    CHECK_THROWS_AS(grid_search(train_ex, valid_ex, m, config_for(hp)), ConfigError);
  }
}
