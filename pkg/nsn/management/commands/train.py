from nsn.decorators import command_errors
from nsn.experiments import run_training

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Train one NSN model; writes model.nsnckpt, runlog.jsonl and frontier.csv.'

    @command_errors
    def handle(self, *args, **options):
        config = self.setup(options)
        out = self.output_dir(options, config)
        run = run_training(config, out)

        summary = run.result.metrics.summary(run.config)
        self.success(
            f'Trained {run.config.mode.value} for {run.config.epochs} epochs: '
            f'anchor accuracy {summary.highest:.4f}, avg ID {summary.avg_id:.4f}, avg OOD {summary.avg_ood:.4f}'
        )
        self.success(f'Artifacts written to {out}')
