#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <sstream>

#include "p2mam/checkpoint.hpp"
#include "p2mam/cli.hpp"
#include "p2mam/corpus.hpp"
#include "support.hpp"

using namespace p2mam;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

// Runs the installed binary, so exit codes are checked end to end.
int run_binary(const std::string& args) {
  const std::string cmd = std::string(P2MAM_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const std::string kFixture = std::string(P2MAM_TEST_DATA) + "/fixture_sessions.txt";

// A prepared chain corpus with a small trained OP checkpoint.
struct Workspace {
  testing::TempDir dir{"cli"};
  std::string corpus = (dir / "corpus").string();
  std::string ckpt = (dir / "m.bin").string();

  std::string config() const { return (dir / "small.cfg").string(); }

  Workspace() {
    Rng rng(21);
    const auto succ = testing::random_successor(25, rng);
    testing::write_text(dir / "s.txt", testing::sessions_text(testing::chain_sessions(succ, 200, 5, rng)));
    testing::write_text(dir / "small.cfg", "d = 16\nn = 5\nb = 2\nepochs = 3\n");
    REQUIRE(run({"prepare", "--input", (dir / "s.txt").string(), "--out", corpus}).code == 0);
    const Run t = run({"train", "--corpus", corpus, "--checkpoint", ckpt, "--config", config(), "--variant", "op",
                       "--seed", "2", "--threads", "1", "--out", (dir / "log.tsv").string()});
    REQUIRE_MESSAGE(t.code == 0, t.err);
  }
};

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) out.push_back(line);
  return out;
}

}  // namespace

TEST_CASE("prepare on the fixture writes a populated corpus") {
  testing::TempDir dir("prep");
  const Run r = run({"prepare", "--input", kFixture, "--out", (dir / "c").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(r.out.rfind("items\t5\ntrain\t10\ntest\t3\n", 0) == 0);
  for (const char* f : {"vocab.tsv", "train_sessions.txt", "test_sessions.txt", "train_examples.tsv",
                        "test_examples.tsv", "stats.tsv"}) {
    CHECK(std::filesystem::exists(dir / "c" / f));
  }
  const std::string stats = testing::read_text(dir / "c" / "stats.tsv");
  CHECK(lines(stats).size() == 2);
  CHECK(lines(stats)[1].rfind("5\t10\t3\t", 0) == 0);
}

TEST_CASE("holdout of 0.2 on ten sessions keeps eight for training") {
  testing::TempDir dir("holdout");
  std::string text;
  for (int i = 0; i < 10; ++i) text += "a b c\n";
  testing::write_text(dir / "s.txt", text);
  const Run r = run({"prepare", "--input", (dir / "s.txt").string(), "--holdout", "0.2", "--out",
                     (dir / "c").string()});
  REQUIRE(r.code == 0);
  const Corpus c = load_corpus(dir / "c");
  CHECK(c.train_sessions.size() == 8);
  CHECK(c.test_sessions.size() == 2);
  CHECK(c.train.size() == 16);
}

TEST_CASE("prepare with a separate test file") {
  testing::TempDir dir("sep");
  testing::write_text(dir / "t.txt", "a b\nb zz c\n");
  const Run r = run({"prepare", "--input", kFixture, "--test", (dir / "t.txt").string(), "--out",
                     (dir / "c").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const Corpus c = load_corpus(dir / "c");
  CHECK(c.test_sessions.size() == 2);
  CHECK(run({"prepare", "--input", kFixture, "--test", (dir / "t.txt").string(), "--holdout", "0.1", "--out",
             (dir / "c2").string()})
            .code == cli::kBadFlags);
}

TEST_CASE("prepare is byte-reproducible") {
  testing::TempDir dir("repro");
  REQUIRE(run({"prepare", "--input", kFixture, "--out", (dir / "a").string()}).code == 0);
  REQUIRE(run({"prepare", "--input", kFixture, "--out", (dir / "b").string()}).code == 0);
  for (const auto& entry : std::filesystem::directory_iterator(dir / "a")) {
    const auto name = entry.path().filename();
    CHECK(testing::read_text(entry.path()) == testing::read_text(dir / "b" / name));
  }
}

TEST_CASE("train, inspect and evaluate") {
  Workspace ws;
  const auto log = lines(testing::read_text(ws.dir / "log.tsv"));
  REQUIRE(log.size() >= 3);
  CHECK(log.front() == "epoch\tstep\tloss\tseconds\tvalid_recall20");
  CHECK(log.back().rfind("# summary epochs=3", 0) == 0);

  const Run inspect = run({"inspect-checkpoint", "--checkpoint", ws.ckpt});
  REQUIRE(inspect.code == 0);
  CHECK(inspect.out.rfind("variant\top\nm\t25\nd\t16\nn\t5\nb\t2\nposition_embeddings\ttrue\npad_mask\ttrue\n"
                          "scale\tfull-d\nparameters\t",
                          0) == 0);

  const std::string metrics = (ws.dir / "metrics.tsv").string();
  const Run e = run({"eval", "--corpus", ws.corpus, "--checkpoint", ws.ckpt, "--out", metrics});
  REQUIRE_MESSAGE(e.code == 0, e.err);
  const auto rows = lines(testing::read_text(metrics));
  REQUIRE(rows.size() == 4);
  CHECK(rows[0] == "variant\tk\trecall\tmrr\tndcg\tN");
  CHECK(rows[1].rfind("op\t5\t", 0) == 0);
  CHECK(rows[3].rfind("op\t20\t", 0) == 0);

  const Run k = run({"eval", "--corpus", ws.corpus, "--checkpoint", ws.ckpt, "--k", "1,3", "--split", "train"});
  REQUIRE(k.code == 0);
  CHECK(lines(k.out).size() == 3);
  CHECK(lines(k.out)[1].rfind("op\t1\t", 0) == 0);
}

TEST_CASE("eval flags must agree with the checkpoint") {
  Workspace ws;
  CHECK(run({"eval", "--corpus", ws.corpus, "--checkpoint", ws.ckpt, "--no-position-embeddings"}).code ==
        cli::kFormatError);
  CHECK(run({"eval", "--corpus", ws.corpus, "--checkpoint", ws.ckpt, "--variant", "o"}).code == cli::kFormatError);
  CHECK(run({"eval", "--corpus", ws.corpus, "--checkpoint", ws.ckpt, "--variant", "op"}).code == cli::kOk);
  CHECK(run({"eval", "--corpus", ws.corpus}).code == cli::kBadFlags);  // learned variant needs a checkpoint
  CHECK(run({"eval", "--corpus", ws.corpus, "--checkpoint", ws.ckpt, "--k", "0"}).code == cli::kBadFlags);
  CHECK(run({"eval", "--corpus", ws.corpus, "--checkpoint", ws.ckpt, "--split", "dev"}).code == cli::kBadFlags);
}

TEST_CASE("pop needs no checkpoint and oracle needs --analysis") {
  Workspace ws;
  const Run pop = run({"eval", "--corpus", ws.corpus, "--variant", "pop"});
  REQUIRE_MESSAGE(pop.code == 0, pop.err);
  CHECK(lines(pop.out)[1].rfind("pop\t5\t", 0) == 0);

  const std::string oracle_ckpt = (ws.dir / "oracle.bin").string();
  REQUIRE(run({"train", "--corpus", ws.corpus, "--checkpoint", oracle_ckpt, "--config", ws.config(), "--variant",
               "oracle", "--threads", "1", "--out", (ws.dir / "olog.tsv").string()})
              .code == 0);
  CHECK(run({"eval", "--corpus", ws.corpus, "--checkpoint", oracle_ckpt}).code == cli::kBadFlags);
  const Run ok = run({"eval", "--corpus", ws.corpus, "--checkpoint", oracle_ckpt, "--analysis"});
  REQUIRE(ok.code == 0);
  CHECK(lines(ok.out)[1].rfind("oracle:analysis\t5\t", 0) == 0);
}

TEST_CASE("analysis exports") {
  Workspace ws;
  const Run attn = run({"export-attention", "--corpus", ws.corpus, "--checkpoint", ws.ckpt, "--max-len", "4"});
  REQUIRE_MESSAGE(attn.code == 0, attn.err);
  const auto a = lines(attn.out);
  REQUIRE(a.size() == 5);
  CHECK(a[0] == "length,pos_1,pos_2,pos_3,pos_4");
  CHECK(a[1] == "1,1.000000,,,");

  const Run cos = run({"cosine", "--corpus", ws.corpus, "--checkpoint", ws.ckpt});
  REQUIRE(cos.code == 0);
  const auto c = lines(cos.out);
  REQUIRE(c.size() == 2);
  CHECK(c[0] == "variant\tavg\tnext");
  CHECK(c[1].rfind("op\t", 0) == 0);

  const Run bench = run({"bench", "--corpus", ws.corpus, "--checkpoint", ws.ckpt, "--limit", "20",
                         "--repetitions", "1"});
  REQUIRE(bench.code == 0);
  CHECK(lines(bench.out)[0] == "variant\tmean_ms\tp95_ms\teps");
}

TEST_CASE("bench on random parameters") {
  const Run r = run({"bench", "--random-items", "500", "--d", "16", "--n", "6", "--b", "2", "--limit", "30",
                     "--repetitions", "2", "--variant", "o"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto l = lines(r.out);
  REQUIRE(l.size() == 2);
  CHECK(l[1].rfind("o\t", 0) == 0);
  CHECK(run({"bench", "--random-items", "500", "--d", "6", "--b", "4"}).code == cli::kBadFlags);
  CHECK(run({"bench"}).code == cli::kBadFlags);
}

TEST_CASE("grid subcommand") {
  testing::TempDir dir("gridcli");
  Rng rng(22);
  const auto succ = testing::random_successor(20, rng);
  testing::write_text(dir / "s.txt", testing::sessions_text(testing::chain_sessions(succ, 60, 4, rng)));
  REQUIRE(run({"prepare", "--input", (dir / "s.txt").string(), "--out", (dir / "c").string()}).code == 0);
  testing::write_text(dir / "g.cfg", "variant = o\nd = 8\nn = 4\nb = 1\nepochs = 2\ngrid.lr = 0,0.01\n");
  const Run r = run({"grid", "--corpus", (dir / "c").string(), "--config", (dir / "g.cfg").string(), "--threads",
                     "1"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto l = lines(r.out);
  // Two candidates means the winner is always on the boundary.
  REQUIRE(l.size() == 4);
  CHECK(l[0] == "lr\tvalid_recall20\tbest\terror");
  CHECK(l[3].rfind("# warning: best lr=", 0) == 0);
  CHECK(r.err.find("warning: best lr=") != std::string::npos);
}

TEST_CASE("configuration precedence: file < environment < flags") {
  Workspace ws;
  testing::write_text(ws.dir / "c.cfg", "variant = o\nd = 8\nn = 3\nb = 1\nepochs = 1\n");
  const std::string out = (ws.dir / "p.bin").string();
  ::setenv("P2MAM_D", "12", 1);
  ::setenv("P2MAM_N", "4", 1);
  const Run r = run({"train", "--corpus", ws.corpus, "--config", (ws.dir / "c.cfg").string(), "--checkpoint", out,
                     "--variant", "mean", "--out", (ws.dir / "plog.tsv").string()});
  ::unsetenv("P2MAM_D");
  ::unsetenv("P2MAM_N");
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const CheckpointHeader h = read_checkpoint_header(out);
  CHECK(h.variant == Variant::Mean);
  CHECK(h.d == 12);
  CHECK(h.n == 4);
  CHECK(h.b == 1);
}

TEST_CASE("exit codes") {
  testing::TempDir dir("codes");
  testing::write_text(dir / "bad.cfg", "d = lots\n");
  testing::write_text(dir / "junk.bin", "not a checkpoint");
  CHECK(run_binary("") == 2);
  CHECK(run_binary("frobnicate") == 2);
  CHECK(run_binary("--help") == 0);
  CHECK(run_binary("prepare --input") == 2);
  CHECK(run_binary("prepare --input /nonexistent/s.txt --out " + (dir / "o").string()) == 3);
  CHECK(run_binary("inspect-checkpoint --checkpoint " + (dir / "junk.bin").string()) == 4);
  CHECK(run_binary("inspect-checkpoint --checkpoint " + (dir / "missing.bin").string()) == 3);
  CHECK(run_binary("eval --corpus " + (dir / "nocorpus").string() + " --variant pop") == 3);
  CHECK(run_binary("train --corpus x --checkpoint y --config " + (dir / "bad.cfg").string()) == 2);
  CHECK(run_binary("prepare --holdout 1.5 --input " + kFixture + " --out " + (dir / "o2").string()) == 2);
}

TEST_CASE("divergent training exits with the numerical code") {
  Workspace ws;
  testing::write_text(ws.dir / "lr.cfg", "d = 8\nn = 4\nb = 1\nlr = 1e200\nepochs = 2\n");
  const Run bad = run({"train", "--corpus", ws.corpus, "--config", (ws.dir / "lr.cfg").string(), "--checkpoint",
                       (ws.dir / "nan.bin").string(), "--variant", "o", "--out", (ws.dir / "nlog.tsv").string()});
  CHECK(bad.code == cli::kNumericalError);
  CHECK(bad.err.find("numerical error") != std::string::npos);
  CHECK(run({"inspect-checkpoint", "--checkpoint", (ws.dir / "nan.bin").string()}).code == 0);
}
