/* Loads a bank and its trunk, replays task 1 on zero inputs and checks the
 * error path. Usage: smoke <bank> <network> */
#include <stdio.h>
#include <string.h>

#include "rosetta.h"

static int check(RosettaStatus s, const char *what) {
    if (s != ROSETTA_STATUS_OK) {
        fprintf(stderr, "%s: %s (%s)\n", what, rosetta_status_name(s), rosetta_last_error());
        return 1;
    }
    return 0;
}

int main(int argc, char **argv) {
    if (argc != 3) {
        return 2;
    }
    RosettaBank *bank = NULL;
    if (check(rosetta_bank_load(argv[1], &bank), "bank_load")) return 1;
    size_t count = 0;
    if (check(rosetta_bank_task_count(bank, &count), "task_count")) return 1;
    RosettaOccupancy occ;
    if (check(rosetta_gate_stats(bank, 1, 2, &occ), "gate_stats")) return 1;
    double sum = occ.only_a + occ.overlap + occ.only_b + occ.unused;
    rosetta_bank_free(bank);

    RosettaModel *model = NULL;
    if (check(rosetta_model_load(argv[1], argv[2], &model), "model_load")) return 1;
    size_t dim = 0, classes = 0;
    if (check(rosetta_model_input_dim(model, &dim), "input_dim")) return 1;
    if (check(rosetta_model_num_classes(model, 1, &classes), "num_classes")) return 1;
    double x[64] = {0};
    double logits[64];
    if (dim > 64 || classes > 64) return 1;
    if (check(rosetta_model_infer(model, 1, x, 1, dim, logits, 64), "infer")) return 1;

    RosettaStatus s = rosetta_model_infer(model, 99, x, 1, dim, logits, 64);
    int unknown_ok = s == ROSETTA_STATUS_UNKNOWN_TASK && strlen(rosetta_last_error()) > 0;
    rosetta_model_free(model);

    printf("tasks=%zu sum=%.12f classes=%zu logit0=%.17g unknown=%d\n", count, sum, classes, logits[0], unknown_ok);
    return unknown_ok ? 0 : 1;
}
