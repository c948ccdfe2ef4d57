#include <stdio.h>
#include "eftd.h"

#define CHECK(call)                                                            \
  do {                                                                         \
    enum EftdStatus s_ = (call);                                               \
    if (s_ != EFTD_STATUS_OK) {                                                \
      char msg_[256];                                                          \
      eftd_last_error_message(msg_, sizeof msg_);                              \
      fprintf(stderr, "%s failed with %d: %s\n", #call, (int)s_, msg_);        \
      return 1;                                                                \
    }                                                                          \
  } while (0)

int main(void) {
  struct EftdEnv *env = NULL;
  struct EftdAgent *agent = NULL;
  size_t k = 0;
  double before = 0.0, after = 0.0;

  CHECK(eftd_env_generate(40, 4, 0.5, 11, &env));
  CHECK(eftd_env_dim(env, &k));
  if (k != 4) return 1;
  CHECK(eftd_agent_new(env, "topk:1", 0.05, EFTD_SAMPLER_MEAN_PATH, 0.0, 1, &agent));
  CHECK(eftd_agent_error(agent, &before));
  CHECK(eftd_agent_step(agent, 20000));
  CHECK(eftd_agent_error(agent, &after));
  if (!(after < 0.5 * before)) {
    fprintf(stderr, "no progress: %g -> %g\n", before, after);
    return 1;
  }
  if (eftd_agent_step(NULL, 1) != EFTD_STATUS_NULL_POINTER) return 1;

  eftd_agent_free(agent);
  eftd_env_free(env);
  printf("ok\n");
  return 0;
}
